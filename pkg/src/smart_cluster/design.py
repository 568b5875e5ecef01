"""SMART design topology: embedded regimens, treatment paths, and known weights."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Optional


class DesignError(ValueError):
    """A treatment path or regimen that cannot occur under the design."""


class DesignKind(enum.Enum):
    """The two cluster-randomized SMART layouts supported.

    ``ADEPT`` re-randomizes only non-responders to first-stage option 1;
    ``PROTOTYPICAL`` re-randomizes non-responders under either option.
    """

    ADEPT = "adept"
    PROTOTYPICAL = "prototypical"

    def __str__(self) -> str:
        return self.value


ADEPT = DesignKind.ADEPT
PROTOTYPICAL = DesignKind.PROTOTYPICAL


def parse_design(name: str | DesignKind) -> DesignKind:
    if isinstance(name, DesignKind):
        return name
    try:
        return DesignKind(str(name).strip().lower())
    except ValueError:
        raise DesignError(f"unknown design {name!r}; expected 'adept' or 'prototypical'") from None


@dataclass(frozen=True)
class EmbeddedDtr:
    """Regimen label ``(a1, a2)``; ``a2`` is None for ADEPT's ``(-1,.)``."""

    a1: int
    a2: Optional[int] = None

    def __post_init__(self):
        if self.a1 not in (-1, 1):
            raise DesignError(f"a1 must be -1 or 1, got {self.a1!r}")
        if self.a2 not in (-1, 1, None):
            raise DesignError(f"a2 must be -1, 1 or unset, got {self.a2!r}")

    @property
    def label(self) -> str:
        a2 = "." if self.a2 is None else str(self.a2)
        return f"({self.a1},{a2})"

    def __str__(self) -> str:
        return self.label

    @classmethod
    def parse(cls, text: str) -> "EmbeddedDtr":
        """Parse labels like ``"(1,-1)"`` or ``"(-1,.)"``."""
        body = text.strip().strip("()")
        parts = [s.strip() for s in body.split(",")]
        if len(parts) != 2:
            raise DesignError(f"cannot parse regimen label {text!r}")
        try:
            a1 = int(parts[0])
            a2 = None if parts[1] in (".", "", "NA") else int(parts[1])
        except ValueError:
            raise DesignError(f"cannot parse regimen label {text!r}") from None
        return cls(a1, a2)


@dataclass(frozen=True)
class TreatmentPath:
    """Observed ``(A1, R, A2)`` sequence for one cluster.

    ``rand_prob_stage1`` is Pr(A1 = observed a1); ``rand_prob_stage2`` is
    Pr(A2 = observed a2 | A1, R) and is only meaningful when ``a2`` is set.
    It defaults to 0.5 when ``a2`` is present and to None otherwise.
    """

    a1: int
    r: int
    a2: Optional[int] = None
    rand_prob_stage1: float = 0.5
    rand_prob_stage2: Optional[float] = None

    def __post_init__(self):
        if self.a1 not in (-1, 1):
            raise DesignError(f"a1 must be -1 or 1, got {self.a1!r}")
        if self.r not in (0, 1):
            raise DesignError(f"r must be 0 or 1, got {self.r!r}")
        if self.a2 not in (-1, 1, None):
            raise DesignError(f"a2 must be -1, 1 or unset, got {self.a2!r}")
        if not 0.0 < self.rand_prob_stage1 < 1.0:
            raise DesignError(f"stage-1 randomization probability {self.rand_prob_stage1} not in (0, 1)")
        if self.a2 is None:
            if self.rand_prob_stage2 is not None:
                raise DesignError("stage-2 randomization probability given for a path without a2")
        else:
            if self.rand_prob_stage2 is None:
                object.__setattr__(self, "rand_prob_stage2", 0.5)
            elif not 0.0 < self.rand_prob_stage2 < 1.0:
                raise DesignError(f"stage-2 randomization probability {self.rand_prob_stage2} not in (0, 1)")

    @property
    def key(self) -> tuple[int, int, Optional[int]]:
        return (self.a1, self.r, self.a2)


_DTRS = {
    DesignKind.ADEPT: (EmbeddedDtr(1, 1), EmbeddedDtr(1, -1), EmbeddedDtr(-1, None)),
    DesignKind.PROTOTYPICAL: (
        EmbeddedDtr(1, 1),
        EmbeddedDtr(1, -1),
        EmbeddedDtr(-1, 1),
        EmbeddedDtr(-1, -1),
    ),
}

# (A1, R, A2) -> figure cell letter
_CELLS = {
    DesignKind.ADEPT: {
        (1, 1, None): "A",
        (1, 0, 1): "B",
        (1, 0, -1): "C",
        (-1, 1, None): "D",
        (-1, 0, None): "E",
    },
    DesignKind.PROTOTYPICAL: {
        (1, 1, None): "A",
        (1, 0, 1): "B",
        (1, 0, -1): "C",
        (-1, 1, None): "D",
        (-1, 0, 1): "E",
        (-1, 0, -1): "F",
    },
}


def embedded_dtrs(design: DesignKind) -> list[EmbeddedDtr]:
    """Embedded regimens in coefficient order: (1,1), (1,-1), then a1 = -1."""
    return list(_DTRS[parse_design(design)])


def design_cells(design: DesignKind) -> dict[tuple[int, int, Optional[int]], str]:
    """Map each possible ``(A1, R, A2)`` pattern to its cell letter."""
    return dict(_CELLS[parse_design(design)])


def rerandomized(design: DesignKind, a1: int, r: int) -> bool:
    """Whether a cluster with this ``(a1, r)`` receives a second randomization."""
    if r == 1:
        return False
    return design is DesignKind.PROTOTYPICAL or a1 == 1


def check_path(path: TreatmentPath, design: DesignKind) -> TreatmentPath:
    design = parse_design(design)
    needs_a2 = rerandomized(design, path.a1, path.r)
    if needs_a2 and path.a2 is None:
        raise DesignError(f"a2 missing for non-responder with a1={path.a1} under {design} design")
    if not needs_a2 and path.a2 is not None:
        if path.r == 1:
            raise DesignError("a2 defined for responder")
        raise DesignError(f"a2 defined for a1={path.a1} non-responder, which {design} does not re-randomize")
    return path


def check_dtr(dtr: EmbeddedDtr, design: DesignKind) -> EmbeddedDtr:
    if dtr not in _DTRS[parse_design(design)]:
        raise DesignError(f"regimen {dtr} is not embedded in the {design} design")
    return dtr


def cell_label(path: TreatmentPath, design: DesignKind) -> str:
    check_path(path, design)
    return _CELLS[parse_design(design)][path.key]


def is_consistent(path: TreatmentPath, dtr: EmbeddedDtr, design: DesignKind) -> bool:
    """Could the observed path have arisen had the cluster followed ``dtr``?

    Responders are consistent with every regimen sharing their first-stage
    treatment, since the second-stage option is never applied to them.
    """
    design = parse_design(design)
    check_path(path, design)
    check_dtr(dtr, design)
    if path.a1 != dtr.a1:
        return False
    if path.a2 is None:
        return True
    return path.a2 == dtr.a2


def consistent_dtrs(path: TreatmentPath, design: DesignKind) -> list[EmbeddedDtr]:
    return [d for d in embedded_dtrs(design) if is_consistent(path, d, design)]


def known_weight(path: TreatmentPath, design: DesignKind) -> float:
    """Inverse of the product of randomization probabilities along the path."""
    check_path(path, design)
    prob = path.rand_prob_stage1
    if path.a2 is not None:
        prob *= path.rand_prob_stage2
    return 1.0 / prob
