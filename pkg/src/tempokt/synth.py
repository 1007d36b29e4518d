"""Synthetic RIIID-style logs with a known achievable AUC.

Correctness follows a latent-trait model: each user has an ability, each
question a difficulty, and answering again within a minute of the previous
interaction earns a recency bonus. Because the generator knows every event's
true probability, it can record the Bayes-optimal AUC that any model is
bounded by; acceptance thresholds are expressed relative to that ceiling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .evaluation import auc
from .featurize import LAG_CAP_S, MS_PER_SECOND
from .ingest import INTERACTIONS_HEADER, QUESTIONS_HEADER

RECENCY_BUCKET_LIMIT = 60  # recency bonus applies while the seconds-bucket is below this


@dataclass(frozen=True)
class SyntheticSpec:
    n_users: int = 500
    n_questions: int = 200
    n_parts: int = 7
    events_min: int = 100
    events_max: int = 300
    gamma: float = 1.0  # weight of the recency bonus in the correctness logit
    theta_scale: float = 1.0
    difficulty_scale: float = 1.0
    # mixture over gap scales: within-a-minute, minutes-to-half-hour, days
    gap_weights: tuple[float, float, float] = (0.5, 0.3, 0.2)
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("n_users", "n_questions", "n_parts", "events_min", "events_max"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.events_max < self.events_min:
            raise ValueError("events_max must be >= events_min")
        if len(self.gap_weights) != 3 or min(self.gap_weights) < 0 or sum(self.gap_weights) == 0:
            raise ValueError("gap_weights must be three non-negative values, not all zero")


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    interaction_rows: list[str] = field(default_factory=list)
    question_rows: list[str] = field(default_factory=list)
    truth: dict = field(default_factory=dict)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                    np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def generate(spec: SyntheticSpec) -> SyntheticData:
    """Sample the full log. Timestamps increase strictly within each user."""
    rng = np.random.default_rng(spec.seed)
    theta = rng.normal(0.0, 1.0, spec.n_users) * spec.theta_scale
    difficulty = rng.normal(0.0, 1.0, spec.n_questions) * spec.difficulty_scale
    parts = rng.integers(1, spec.n_parts + 1, spec.n_questions)
    correct_answers = rng.integers(0, 4, spec.n_questions)

    weights = np.asarray(spec.gap_weights, dtype=np.float64)
    weights = weights / weights.sum()

    data = SyntheticData(spec=spec)
    for qid in range(spec.n_questions):
        data.question_rows.append(
            f"{qid},{qid},{correct_answers[qid]},{parts[qid]},{qid % 188}"
        )

    true_probs: list[float] = []
    labels: list[int] = []
    row_id = 0
    for user in range(spec.n_users):
        n_events = int(rng.integers(spec.events_min, spec.events_max + 1))
        ts = 0
        prev_elapsed: int | None = None
        prev_expl: bool | None = None
        for i in range(n_events):
            if i == 0:
                gap = 0
            else:
                scale = rng.choice(3, p=weights)
                if scale == 0:
                    gap = int(rng.integers(1_000, 60_000))  # under a minute
                elif scale == 1:
                    gap = int(rng.integers(60_000, 1_800_000))  # a minute to half an hour
                else:
                    gap = int(rng.integers(86_400_000, 3 * 86_400_000))  # one to three days
            ts += gap
            lag_s_bucket = min(gap // MS_PER_SECOND, LAG_CAP_S)
            bonus = 1.0 if lag_s_bucket < RECENCY_BUCKET_LIMIT else 0.0
            qid = int(rng.integers(0, spec.n_questions))
            p = float(_sigmoid(np.asarray(theta[user] - difficulty[qid] + spec.gamma * bonus)))
            y = int(rng.random() < p)
            true_probs.append(p)
            labels.append(y)

            elapsed_field = "" if prev_elapsed is None else str(prev_elapsed)
            expl_field = "" if prev_expl is None else str(prev_expl)
            answer = correct_answers[qid] if y else int(rng.integers(0, 4))
            data.interaction_rows.append(
                f"{row_id},{ts},{user},{qid},0,{i},{answer},{y},{elapsed_field},{expl_field}"
            )
            row_id += 1
            prev_elapsed = int(rng.integers(1_000, 120_000))
            prev_expl = bool(rng.random() < 0.8)

    data.truth = {
        "seed": spec.seed,
        "gamma": spec.gamma,
        "n_users": spec.n_users,
        "n_questions": spec.n_questions,
        "n_events": row_id,
        "recency_bucket_limit": RECENCY_BUCKET_LIMIT,
        "theta": {str(u): float(theta[u]) for u in range(spec.n_users)},
        "difficulty": {str(q): float(difficulty[q]) for q in range(spec.n_questions)},
        "oracle_auc": auc(np.asarray(true_probs), np.asarray(labels)),
    }
    return data


def write_csvs(data: SyntheticData, out_dir: str | Path) -> tuple[Path, Path, Path]:
    """Write interactions.csv, questions.csv and truth.json under out_dir."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    interactions = out / "interactions.csv"
    questions = out / "questions.csv"
    truth = out / "truth.json"
    interactions.write_text(
        INTERACTIONS_HEADER + "\n" + "\n".join(data.interaction_rows) + "\n")
    questions.write_text(
        QUESTIONS_HEADER + "\n" + "\n".join(data.question_rows) + "\n")
    truth.write_text(json.dumps(data.truth, indent=2, sort_keys=True) + "\n")
    return interactions, questions, truth
