"""Attack-probability formulas, the probability table and Monte Carlo estimates."""
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy import stats

from utils.ntp import VARIANT_TRAITS, ClientConfig, ClientVariant

logger = logging.getLogger(__name__)

P_RATE = 0.38
KOD_SHARE = 0.33
CONTROL_EXPOSED_SHARE = 0.053
TABLE_M = range(1, 10)
CONFIDENCE = 0.95
MC_CHUNK = 50_000


def required_removals(m: int) -> int:
    """Associations an attacker must remove from a client holding m of them."""
    if m < 1:
        raise ValueError(f"m must be at least 1, got {m}")
    return max(m // 2 + 1, m - 2)


def p1(n: int, p_rate: float = P_RATE) -> float:
    """Probability that n specific servers all rate-limit."""
    if n < 0 or not 0 <= p_rate <= 1:
        raise ValueError(f"invalid arguments n={n}, p_rate={p_rate}")
    return p_rate ** n


def p2(m: int, n: int, p_rate: float = P_RATE) -> float:
    """Probability that at least n of m servers rate-limit."""
    if not 0 <= n <= m or not 0 <= p_rate <= 1:
        raise ValueError(f"invalid arguments m={m}, n={n}, p_rate={p_rate}")
    return sum(math.comb(m, i) * p_rate ** i * (1 - p_rate) ** (m - i) for i in range(n, m + 1))


@dataclass
class ProbabilityRow:
    m: int
    n: int
    p1: float
    p2: float


@dataclass
class MonteCarloEstimate:
    scenario: int
    m: int
    n: int
    p_rate: float
    trials: int
    successes: int
    estimate: float
    ci_low: float
    ci_high: float

    @property
    def half_width(self) -> float:
        return (self.ci_high - self.ci_low) / 2

    def contains(self, value: float) -> bool:
        return self.ci_low <= value <= self.ci_high


@dataclass
class ProbabilityTable:
    p_rate: float
    rows: List[ProbabilityRow] = field(default_factory=list)
    mc_rows: List[MonteCarloEstimate] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        df = pd.DataFrame([asdict(r) for r in self.rows], columns=["m", "n", "p1", "p2"])
        if self.mc_rows:
            mc = pd.DataFrame([{
                "m": e.m,
                f"mc_p{e.scenario}": e.estimate,
                f"mc_p{e.scenario}_hw": e.half_width,
                "trials": e.trials,
            } for e in self.mc_rows])
            mc = mc.groupby("m", as_index=False).first()
            df = df.merge(mc, on="m", how="left")
        return df


def table3(p_rate: float = P_RATE, ms: Sequence[int] = TABLE_M) -> ProbabilityTable:
    table = ProbabilityTable(p_rate=p_rate)
    for m in ms:
        n = required_removals(m)
        table.rows.append(ProbabilityRow(m, n, p1(n, p_rate), p2(m, n, p_rate)))
    return table


def format_percent_table(df: pd.DataFrame) -> pd.DataFrame:
    out = df.copy()
    for column in out.columns:
        if column.startswith("p") or (column.startswith("mc_") and not column.endswith("_hw")):
            out[column] = out[column].map(lambda v: f"{100 * v:.1f}%" if pd.notna(v) else "")
        elif column.endswith("_hw"):
            out[column] = out[column].map(lambda v: f"±{100 * v:.2f}" if pd.notna(v) else "")
    return out


def wilson_interval(successes: int, trials: int, confidence: float = CONFIDENCE) -> Tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if trials < 1:
        raise ValueError("trials must be at least 1")
    phat = successes / trials
    z = stats.norm.ppf(1 - (1 - confidence) / 2)
    centre = phat + z ** 2 / (2 * trials)
    spread = z * math.sqrt(phat * (1 - phat) / trials + z ** 2 / (4 * trials ** 2))
    denominator = 1 + z ** 2 / trials
    return max(0.0, (centre - spread) / denominator), min(1.0, (centre + spread) / denominator)


def _count_vulnerable(scenario: int, m: int, n: int, p_rate: float, trials: int,
                      seed: np.random.SeedSequence) -> int:
    rng = np.random.default_rng(seed)
    limiting = rng.random((trials, m)) < p_rate
    if scenario == 1:
        # the client's own servers are removed one after another, so the first n must all limit
        hits = limiting[:, :n].all(axis=1)
    else:
        hits = limiting.sum(axis=1) >= n
    return int(hits.sum())


def monte_carlo_vulnerability(scenario: int, m: int, trials: int, seed: int = 0, p_rate: float = P_RATE,
                              n: Optional[int] = None, jobs: int = 1) -> MonteCarloEstimate:
    """Estimate the vulnerable share of clients by drawing rate-limit assignments per trial."""
    if scenario not in (1, 2):
        raise ValueError(f"scenario must be 1 or 2, got {scenario}")
    if trials < 1:
        raise ValueError("trials must be at least 1")
    n = required_removals(m) if n is None else n
    chunks = [MC_CHUNK] * (trials // MC_CHUNK)
    if trials % MC_CHUNK:
        chunks.append(trials % MC_CHUNK)
    seeds = np.random.SeedSequence(seed).spawn(len(chunks))
    counts = Parallel(n_jobs=jobs)(
        delayed(_count_vulnerable)(scenario, m, n, p_rate, size, s) for size, s in zip(chunks, seeds)
    )
    successes = int(sum(counts))
    low, high = wilson_interval(successes, trials)
    logger.debug("scenario %s m=%s n=%s: %s/%s", scenario, m, n, successes, trials)
    return MonteCarloEstimate(scenario, m, n, p_rate, trials, successes, successes / trials, low, high)


def table3_monte_carlo(trials: int, seed: int = 0, p_rate: float = P_RATE, ms: Sequence[int] = TABLE_M,
                       jobs: int = 1) -> ProbabilityTable:
    table = table3(p_rate, ms)
    children = np.random.SeedSequence(seed).spawn(2 * len(table.rows))
    for i, row in enumerate(table.rows):
        for scenario in (1, 2):
            child_seed = int(children[2 * i + scenario - 1].generate_state(1)[0])
            table.mc_rows.append(monte_carlo_vulnerability(scenario, row.m, trials, child_seed, p_rate, row.n, jobs))
    return table


def binomial_consistent(successes: int, trials: int, p_max: float, alpha: float = 0.01) -> Tuple[bool, float]:
    """Whether `successes` out of `trials` is consistent with a per-trial rate of at most p_max."""
    result = stats.binomtest(successes, trials, p_max, alternative="greater")
    return result.pvalue >= alpha, float(result.pvalue)


def client_matrix() -> pd.DataFrame:
    """Per-variant usage share, boot/run-time exposure and removals needed."""
    rows = []
    for variant, traits in VARIANT_TRAITS.items():
        config = ClientConfig(variant=variant, resolver_ip="0.0.0.0")
        target = config.association_target
        if variant == ClientVariant.SNTP_ONESHOT:
            run_time = "n/a"
        else:
            run_time = "yes" if traits.runtime_dns else "no"
        rows.append({
            "client": traits.label,
            "variant": variant.value,
            "usage_share": traits.usage_share,
            "boot_time": "yes",
            "run_time": run_time,
            "associations": target if target is not None else "all",
            "removals": required_removals(target) if traits.runtime_dns and target else "",
        })
    return pd.DataFrame(rows)


def runtime_exposed_share() -> float:
    """Surveyed usage share of clients open to run-time attacks."""
    return sum(t.usage_share or 0.0 for t in VARIANT_TRAITS.values() if t.runtime_dns)


def summarize_trials(successes: Sequence[bool], durations_ms: Sequence[Optional[int]]) -> Dict:
    """Success rate, Wilson interval and mean duration for a batch of simulated trials."""
    trials = len(successes)
    hits = int(sum(bool(s) for s in successes))
    low, high = wilson_interval(hits, trials) if trials else (float("nan"), float("nan"))
    finished = [d for d, s in zip(durations_ms, successes) if s and d is not None]
    return {
        "trials": trials,
        "successes": hits,
        "rate": hits / trials if trials else float("nan"),
        "ci_low": low,
        "ci_high": high,
        "mean_duration_s": float(np.mean(finished)) / 1000 if finished else float("nan"),
    }
