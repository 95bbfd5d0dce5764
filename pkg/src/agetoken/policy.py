from __future__ import annotations

import enum
from dataclasses import dataclass

from .errors import MalformedError


class Assurance(enum.IntEnum):
    LOW = 1
    SUBSTANTIAL = 2
    HIGH = 3

    @classmethod
    def parse(cls, value: str | int | Assurance) -> Assurance:
        if isinstance(value, cls):
            return value
        if isinstance(value, int):
            return cls(value)
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise MalformedError(f"unknown assurance level {value!r}") from None


@dataclass(frozen=True)
class AgePolicy:
    minimum_age_years: int = 18
    required_assurance: Assurance = Assurance.LOW

    def __post_init__(self):
        if not 1 <= int(self.minimum_age_years) <= 150:
            raise MalformedError("minimum_age_years must be within [1, 150]")
        object.__setattr__(self, "required_assurance", Assurance.parse(self.required_assurance))

    def satisfies(self, required: AgePolicy) -> bool:
        """True if a credential issued under self is good enough for ``required``."""
        return (self.minimum_age_years >= required.minimum_age_years
                and self.required_assurance >= required.required_assurance)

    @property
    def label(self) -> str:
        return f"{self.minimum_age_years}+/{self.required_assurance.name.lower()}"

    @classmethod
    def parse(cls, label: str) -> AgePolicy:
        """Parse ``"18+/low"`` or ``"18"``."""
        age, _, assurance = label.partition("/")
        try:
            years = int(age.rstrip("+"))
        except ValueError:
            raise MalformedError(f"bad policy label {label!r}") from None
        return cls(years, Assurance.parse(assurance or "low"))

    def to_dict(self) -> dict:
        return {"minimum_age_years": self.minimum_age_years,
                "required_assurance": self.required_assurance.name.lower()}

    @classmethod
    def from_dict(cls, d: dict) -> AgePolicy:
        try:
            return cls(int(d["minimum_age_years"]), Assurance.parse(d.get("required_assurance", "low")))
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedError(f"bad policy: {exc}") from None
