"""The 17 Local Climate Zone classes."""

from enum import IntEnum

N_CLASSES = 17


class LczClass(IntEnum):
    """LCZ class with canonical integer codes 0-16.

    Codes 0-9 are the built types LCZ1-LCZ10, codes 10-16 the land-cover
    types LCZA-LCZG.
    """

    LCZ1 = 0
    LCZ2 = 1
    LCZ3 = 2
    LCZ4 = 3
    LCZ5 = 4
    LCZ6 = 5
    LCZ7 = 6
    LCZ8 = 7
    LCZ9 = 8
    LCZ10 = 9
    LCZA = 10
    LCZB = 11
    LCZC = 12
    LCZD = 13
    LCZE = 14
    LCZF = 15
    LCZG = 16

    @property
    def short(self) -> str:
        """Short form as used in point files: ``"1"``..``"10"``, ``"A"``..``"G"``."""
        return self.name[3:]

    @property
    def is_built(self) -> bool:
        return self.value < 10

    @classmethod
    def parse(cls, text) -> "LczClass":
        s = str(text).strip().upper()
        if s.startswith("LCZ"):
            s = s[3:]
        try:
            return cls["LCZ" + s]
        except KeyError:
            raise ValueError(f"not an LCZ class: {text!r}") from None


CLASS_NAMES = tuple(c.name for c in LczClass)
