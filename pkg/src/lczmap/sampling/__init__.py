"""Point labels to balanced, split, serialised patch datasets."""

from .augment import (
    DIHEDRAL_NAMES,
    augment_rebalance,
    composition_table,
    dihedral,
    inverse,
    stratified_split,
)
from .dataset import (
    SPLITS,
    UNSET,
    LabeledPoint,
    SampleSet,
    SkippedPoint,
    build_dataset,
    load_dataset,
    read_points_csv,
    save_dataset,
    write_points_csv,
)
from .rules import FLAGS, RuleConfig, SiteSummary, rule_assist_label, summarize_site

__all__ = [
    "DIHEDRAL_NAMES", "FLAGS", "SPLITS", "UNSET", "LabeledPoint", "RuleConfig",
    "SampleSet", "SiteSummary", "SkippedPoint", "augment_rebalance", "build_dataset",
    "composition_table", "dihedral", "inverse", "load_dataset", "read_points_csv",
    "rule_assist_label", "save_dataset", "stratified_split", "summarize_site",
    "write_points_csv",
]
