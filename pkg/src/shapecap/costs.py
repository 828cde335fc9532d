"""Labeling-cost ledger for the annotation schemes the captioning approaches rely on.

Unit prices follow the Amazon Mechanical Turk built-in workflow: $0.012 per
image-level label, $0.036 per bounding box, and $0.108 per relationship
triplet (three boxes). Caption pairs carry no marketplace price and are
reported as "-". All arithmetic is done in :class:`decimal.Decimal` so the
reported figures carry no binary-float drift.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from decimal import Decimal, ROUND_HALF_UP

PRICE_BBOX = Decimal("0.036")
PRICE_TRIPLET = Decimal("0.108")  # three boxes per triplet
PRICE_IMAGE_LEVEL = Decimal("0.012")

MILLION = Decimal(1_000_000)


@dataclass(frozen=True)
class CostRow:
    """Label counts (in millions) and pricing for one captioning approach."""

    approach: str
    caption_pairs_m: Decimal = Decimal(0)
    bbox_m: Decimal = Decimal(0)
    triplet_m: Decimal = Decimal(0)
    image_level_m: Decimal = Decimal(0)
    labelers: int = 3
    bbox_price: Decimal = PRICE_BBOX
    triplet_price: Decimal = PRICE_TRIPLET
    image_level_price: Decimal = PRICE_IMAGE_LEVEL

    def __post_init__(self) -> None:
        for name in ("caption_pairs_m", "bbox_m", "triplet_m", "image_level_m"):
            if getattr(self, name) < 0:
                raise ValueError(f"negative label count {name!r} in row {self.approach!r}")
        if self.labelers < 1:
            raise ValueError("labeler multiplicity must be >= 1")
        for name in ("bbox_price", "triplet_price", "image_level_price"):
            if getattr(self, name) <= 0:
                raise ValueError(f"unit price {name!r} must be positive")

    @property
    def priced(self) -> bool:
        """Caption-pair-only rows have no marketplace price and report "-"."""
        return (self.bbox_m + self.triplet_m + self.image_level_m) > 0


def labeling_cost(row: CostRow) -> Decimal:
    """Total labeling cost in dollars: multiplicity x sum(count x unit price).

    Caption pairs contribute nothing (their unit price is unlisted).
    """
    per_labeler = (
        row.bbox_m * MILLION * row.bbox_price
        + row.triplet_m * MILLION * row.triplet_price
        + row.image_level_m * MILLION * row.image_level_price
    )
    return per_labeler * row.labelers


def cost_in_thousands(row: CostRow) -> Decimal:
    """Cost rounded to 0.1k for display, matching the published figures."""
    return (labeling_cost(row) / Decimal(1000)).quantize(Decimal("0.1"), rounding=ROUND_HALF_UP)


def builtin_rows() -> list[CostRow]:
    """The nine approaches compared in the labeling-cost study."""
    d = Decimal
    return [
        CostRow("Pivoting", caption_pairs_m=d("0.24")),
        CostRow("Song et al.", caption_pairs_m=d("1.82")),
        CostRow("Guo et al.", caption_pairs_m=d("0.12")),
        CostRow("Feng et al.", bbox_m=d("0.71")),
        CostRow("Laina et al.", bbox_m=d("1.05")),
        CostRow("Cao et al.", bbox_m=d("0.28"), triplet_m=d("0.20")),
        CostRow("Gu et al.", bbox_m=d("3.84"), triplet_m=d("2.35")),
        CostRow("SCS", bbox_m=d("3.84")),
        CostRow("WS-UIC", image_level_m=d("1.11")),
    ]


# Published cost column, thousands of dollars, for the priced rows.
PUBLISHED_COSTS_K = {
    "Feng et al.": Decimal("76.7"),
    "Laina et al.": Decimal("113.4"),
    "Cao et al.": Decimal("95.0"),
    "Gu et al.": Decimal("1176.1"),
    "SCS": Decimal("414.7"),
    "WS-UIC": Decimal("40.0"),
}


def cost_table() -> list[tuple[str, str]]:
    """(approach, displayed cost) for every built-in row; unpriced rows show "-"."""
    table = []
    for row in builtin_rows():
        if row.priced:
            table.append((row.approach, f"{cost_in_thousands(row)}k"))
        else:
            table.append((row.approach, "-"))
    return table


def format_table() -> str:
    """Reproduction next to the published figures with PASS/FAIL per row."""
    lines = [f"{'Approach':<12} {'Computed':>10} {'Published':>10}  Status"]
    for approach, shown in cost_table():
        published = PUBLISHED_COSTS_K.get(approach)
        if published is None:
            lines.append(f"{approach:<12} {shown:>10} {'-':>10}  PASS")
        else:
            status = "PASS" if shown == f"{published}k" else "FAIL"
            lines.append(f"{approach:<12} {shown:>10} {str(published) + 'k':>10}  {status}")
    return "\n".join(lines)
