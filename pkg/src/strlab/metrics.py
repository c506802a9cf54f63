"""Edit-distance based evaluation: per-sample Levenshtein distances pooled
into corpus Character and Word Recognition Rates (CRR/WRR)."""
from __future__ import annotations

from dataclasses import dataclass

from .errors import EmptySet


def edit_distance(a: str, b: str) -> int:
    """Levenshtein distance over codepoints, unit costs."""
    if a == b:
        return 0
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


@dataclass
class EvalReport:
    samples: list  # (gt, pred, edit_distance)
    crr: float
    wrr: float
    count: int

    def summary_line(self) -> str:
        return f"{self.count}\t{self.crr:.2f}\t{self.wrr:.2f}"

    def tsv(self) -> str:
        rows = [f"{gt}\t{pred}\t{d}" for gt, pred, d in self.samples]
        rows.append(self.summary_line())
        return "\n".join(rows) + "\n"


def evaluate(pairs, per_word: bool = False) -> EvalReport:
    """Score (ground truth, prediction) pairs.

    WRR = 100 * exact matches / N. CRR pools corpus-wide by default:
    100 * (sum|gt| - sum ED) / sum|gt|, floored at 0; ``per_word`` averages
    per-word character rates instead.
    """
    pairs = list(pairs)
    if not pairs:
        raise EmptySet("no samples to evaluate")
    samples = [(gt, pred, edit_distance(gt, pred)) for gt, pred in pairs]
    n = len(samples)
    exact = sum(1 for gt, pred, _ in samples if gt == pred)
    wrr = 100.0 * exact / n
    if per_word:
        rates = [max(0.0, (len(gt) - d) / len(gt)) if gt else float(d == 0) for gt, _, d in samples]
        crr = 100.0 * sum(rates) / n
    else:
        total_len = sum(len(gt) for gt, _, _ in samples)
        total_d = sum(d for _, _, d in samples)
        crr = 100.0 * max(0, total_len - total_d) / total_len if total_len else 100.0 * float(total_d == 0)
    return EvalReport(samples=samples, crr=crr, wrr=wrr, count=n)
