"""Mode-comparison tables, curve plots and directional-claim audits.

Scores are plain dicts as written by ``cli score``::

    {"vs": {"rate": 0.12, "substitutions": 3, "deletions": 1, "insertions": 0, "ref_len": 33}, ...}

so every function here works from the JSON artifacts alone and never touches
checkpoints.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from corpus import DOMAIN_NAMES, RARE_DOMAINS

log = logging.getLogger(__name__)

BASE_SET = DOMAIN_NAMES[0]


@dataclass
class ClaimResult:
    name: str
    passed: bool
    numbers: dict = field(default_factory=dict)
    description: str = ""

    def format(self):
        status = "PASS" if self.passed else "FAIL"
        numbers = ", ".join(f"{k}={_fmt(v)}" for k, v in self.numbers.items())
        return f"[{status}] {self.name}: {self.description} ({numbers})"


def _fmt(v):
    return f"{v:.4f}" if isinstance(v, float) else str(v)


def rare_rate(scores):
    """Pooled WER over the rare-word test sets."""
    errors = sum(s["substitutions"] + s["deletions"] + s["insertions"] for s in (scores[n] for n in RARE_DOMAINS))
    ref_len = sum(scores[name]["ref_len"] for name in RARE_DOMAINS)
    if ref_len == 0:
        raise ValueError("rare-word test sets are empty")
    return errors / ref_len


def wer_table(rows):
    """Text table: one row per label, WER (%) per test set plus the pooled rare-word column.

    Parameters
    ----------
    rows: dict[str, dict]
        Row label (e.g. ``"mhat/jeit"``) to per-set scores.
    """
    columns = [*DOMAIN_NAMES, "rare"]
    label_width = max([len("mode"), *(len(k) for k in rows)])
    header = f"{'mode':<{label_width}} " + " ".join(f"{c:>7}" for c in columns)
    lines = [header, "-" * len(header)]
    for label, scores in rows.items():
        rates = [100 * scores[c]["rate"] for c in DOMAIN_NAMES] + [100 * rare_rate(scores)]
        lines.append(f"{label:<{label_width}} " + " ".join(f"{r:>7.2f}" for r in rates))
    return "\n".join(lines)


##########
# Claims #
##########
def claim_rare_word_gain(base, jeit, min_relative_gain=0.10, max_base_degradation=0.005):
    """Joint ILM training lowers rare-word WER without hurting the base test set."""
    base_rare, jeit_rare = rare_rate(base), rare_rate(jeit)
    gain = (base_rare - jeit_rare) / base_rare if base_rare > 0 else 0.0
    degradation = jeit[BASE_SET]["rate"] - base[BASE_SET]["rate"]
    return ClaimResult(
        "rare-word gain",
        gain >= min_relative_gain and degradation <= max_base_degradation,
        {"base_rare": base_rare, "jeit_rare": jeit_rare, "relative_gain": gain, "base_set_degradation": degradation},
        f"JEIT rare-word WER >= {min_relative_gain:.0%} relative better, base set within {100 * max_base_degradation:.1f} points",
    )


def best_step(curve):
    """``(step, wer)`` of the lowest WER; earliest step on ties."""
    steps, wers = zip(*curve)
    i = int(np.argmin(wers))
    return steps[i], wers[i]


def claim_adaptation_stability(hat_curve, mhat_curve, min_rise=0.02):
    """Aggressive adaptation overfits HAT early while MHAT keeps improving.

    Parameters
    ----------
    hat_curve, mhat_curve: list[tuple[int, float]]
        ``(step, rare-word WER)`` eval points.
    """
    if not hat_curve or not mhat_curve:
        raise ValueError("adaptation curves must be non-empty")
    hat_step, hat_best = best_step(hat_curve)
    mhat_step, _ = best_step(mhat_curve)
    hat_final = hat_curve[-1][1]
    rise = hat_final - hat_best
    return ClaimResult(
        "adaptation stability",
        hat_step < mhat_step and rise >= min_rise,
        {
            "hat_best_step": hat_step,
            "mhat_best_step": mhat_step,
            "hat_best": hat_best,
            "hat_final": hat_final,
            "hat_rise": rise,
        },
        f"HAT peaks before MHAT and degrades by >= {100 * min_rise:.0f} points",
    )


def claim_combined_training(jeit, joist, cjjt, cjjt_fused, tie=0.002):
    """Combining both text paths beats either alone; fusion does not hurt the combination."""
    r = {name: rare_rate(s) for name, s in (("jeit", jeit), ("joist", joist), ("cjjt", cjjt), ("cjjt_fused", cjjt_fused))}
    passed = r["cjjt"] <= min(r["jeit"], r["joist"]) and r["cjjt_fused"] <= r["cjjt"] + tie
    return ClaimResult(
        "combined training",
        passed,
        r,
        f"CJJT <= min(JEIT, JOIST); fusion <= CJJT (+{100 * tie:.1f} points tolerance)",
    )


def claim_ilm_perplexity(base_ppl, jeit_ppl, min_relative_gain=0.20):
    gain = (base_ppl - jeit_ppl) / base_ppl
    return ClaimResult(
        "ILM perplexity",
        gain >= min_relative_gain,
        {"base_ppl": float(base_ppl), "jeit_ppl": float(jeit_ppl), "relative_gain": gain},
        f"JEIT ILM perplexity >= {min_relative_gain:.0%} lower than BASE",
    )


def check_claims(scores, curves=None, perplexities=None):
    """Run every claim whose inputs are present.

    Parameters
    ----------
    scores: dict[str, dict]
        Keys like ``"mhat/base"``, ``"mhat/jeit"``, ``"mhat/cjjt+fusion"``.
    curves: Optional[dict[str, list]]
        ``"hat/ilma"`` and ``"mhat/ilma"`` adaptation curves.
    perplexities: Optional[dict[str, float]]
        Held-out ILM perplexity keyed like ``scores``.

    Returns
    -------
    list[ClaimResult]
    """
    curves = curves or {}
    perplexities = perplexities or {}
    out = []
    if {"mhat/base", "mhat/jeit"} <= scores.keys():
        out.append(claim_rare_word_gain(scores["mhat/base"], scores["mhat/jeit"]))
    if {"hat/ilma", "mhat/ilma"} <= curves.keys():
        out.append(claim_adaptation_stability(curves["hat/ilma"], curves["mhat/ilma"]))
    if {"mhat/jeit", "mhat/joist", "mhat/cjjt", "mhat/cjjt+fusion"} <= scores.keys():
        out.append(
            claim_combined_training(
                scores["mhat/jeit"], scores["mhat/joist"], scores["mhat/cjjt"], scores["mhat/cjjt+fusion"]
            )
        )
    if {"mhat/base", "mhat/jeit"} <= perplexities.keys():
        out.append(claim_ilm_perplexity(perplexities["mhat/base"], perplexities["mhat/jeit"]))
    for claim in out:
        log.info(claim.format())
    return out


#########
# Plots #
#########
def eval_curve(records, key="wer_rare"):
    """``(step, value)`` pairs from the eval records of a metrics log."""
    return [(r["step"], r[key]) for r in records if r["kind"] == "eval" and key in r]


def plot_curves(curves, path, ylabel="Rare-word WER (%)", title="WER vs. training steps", scale=100.0):
    """Write an SVG line plot of ``{label: [(step, value), ...]}``, values multiplied by ``scale``."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # SVG must be byte-stable across runs.
    with plt.rc_context({"svg.hashsalt": "jeitlab"}):
        fig = plt.figure(figsize=(6, 4))
        ax = fig.add_subplot(1, 1, 1)
        for label in sorted(curves):
            steps, values = zip(*curves[label]) if curves[label] else ((), ())
            ax.plot(steps, [scale * v for v in values], marker="o", label=label)
        ax.set_xlabel("Training steps")
        ax.set_ylabel(ylabel)
        ax.set_title(title)
        ax.legend(loc="upper right")
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
