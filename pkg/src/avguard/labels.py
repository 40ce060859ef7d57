"""Command vocabulary shared by the audio, image and model sides."""

from enum import IntEnum


class Target(IntEnum):
    """Classification targets; the integer value is the logit column."""

    GO = 0
    RIGHT = 1
    LEFT = 2
    STOP = 3
    ANOMALY = 4

    @property
    def word(self) -> str:
        return self.name.lower()

    @classmethod
    def from_word(cls, word: str) -> "Target":
        try:
            return cls[word.strip().upper()]
        except KeyError:
            raise ValueError(f"Unknown target {word!r}; expected one of {[t.word for t in cls]}") from None


COMMANDS: tuple[Target, ...] = (Target.GO, Target.RIGHT, Target.LEFT, Target.STOP)
N_CLASSES = len(Target)
