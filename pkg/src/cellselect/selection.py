"""Budget arithmetic and support-set selection.

Selection takes the budget-many highest-scoring patches; because the
objective is a plain sum of per-patch scores, the greedy top-k equals the
exhaustive subset argmax. Ties break lexicographically on
(image_id, row, col) so runs are reproducible.
"""

import json
from dataclasses import dataclass

from .errors import BudgetExceedsPoolError
from .imaging import PatchRef


def budget_from_shots(shots, patches_per_image):
    """Annotation budget: shots times patches extracted per full image."""
    if shots < 1 or patches_per_image < 1:
        raise ValueError("shots and patches_per_image must be positive")
    return shots * patches_per_image


@dataclass
class SelectionResult:
    chosen: list           # PatchRefs, best first
    budget: int
    scorer: str
    threshold_score: float  # score of the last admitted patch


def select_support(records, budget):
    """Top-budget records by score with deterministic tie-breaking."""
    if budget < 1:
        raise ValueError("budget must be positive")
    if budget > len(records):
        raise BudgetExceedsPoolError(
            f"budget {budget} exceeds pool of {len(records)} scored patches"
        )
    scorers = {rec.scorer for rec in records}
    if len(scorers) != 1:
        raise ValueError(f"records mix scorers: {sorted(scorers)}")
    ranked = sorted(records, key=lambda r: (-r.value, r.patch.key()))
    keys = {r.patch.key() for r in records}
    if len(keys) != len(records):
        raise ValueError("duplicate patches in scored pool")
    top = ranked[:budget]
    return SelectionResult(
        chosen=[r.patch for r in top],
        budget=budget,
        scorer=scorers.pop(),
        threshold_score=top[-1].value,
    )


def write_selection_json(result, records, path):
    by_key = {r.patch.key(): r.value for r in records}
    payload = {
        "scorer": result.scorer,
        "budget": result.budget,
        "threshold_score": result.threshold_score,
        "chosen": [
            {
                "image_id": ref.image_id,
                "row": ref.row,
                "col": ref.col,
                "size": ref.size,
                "score": by_key[ref.key()],
            }
            for ref in result.chosen
        ],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def read_selection_json(path):
    with open(path) as fh:
        payload = json.load(fh)
    chosen = [PatchRef(e["image_id"], e["row"], e["col"], e["size"])
              for e in payload["chosen"]]
    return SelectionResult(chosen, payload["budget"], payload["scorer"],
                           payload["threshold_score"])
