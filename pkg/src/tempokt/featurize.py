"""Turning user histories into fixed-length, model-ready token windows.

The decoder's temporal inputs are categorical: the time spent on the previous
question and the gap since the previous interaction, the latter bucketed at
three granularities (seconds capped at 300, minutes capped at 1440, days
capped at 365). Each stream gets a dedicated pad index appended after its
real vocabulary.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path
from typing import IO, Mapping, Sequence

import numpy as np

from .ingest import QuestionMeta, UserHistory

MS_PER_SECOND = 1_000
MS_PER_MINUTE = 60_000
MS_PER_DAY = 86_400_000

ELAPSED_CAP_S = 300
LAG_CAP_S = 300
LAG_CAP_M = 1440
LAG_CAP_D = 365

RESPONSE_START = 0  # decoder sees this in place of the nonexistent previous answer

_DATASET_MAGIC = b"TKDS0001"

# Stream storage order in the binary container. Token streams are int32,
# target/valid are uint8, per-window metadata follows.
STREAM_NAMES = (
    "question", "part", "explanation", "response",
    "elapsed", "lag_s", "lag_m", "lag_d", "target", "valid",
)


@dataclass(frozen=True)
class VocabSpec:
    """Per-stream vocabulary sizes, each including one trailing pad row.

    pad_id for a stream equals its non-pad size, i.e. the largest index.
    """

    n_questions: int  # distinct question ids + 1 pad
    n_parts: int = 7 + 1
    n_explanation: int = 3 + 1
    n_response: int = 3 + 1
    n_elapsed: int = ELAPSED_CAP_S + 1 + 1
    n_lag_s: int = LAG_CAP_S + 1 + 1
    n_lag_m: int = LAG_CAP_M + 1 + 1
    n_lag_d: int = LAG_CAP_D + 1 + 1

    def __post_init__(self) -> None:
        for name, size in self.sizes().items():
            if size <= 0:
                raise ValueError(f"vocab size for '{name}' must be positive, got {size}")

    def sizes(self) -> dict[str, int]:
        return {
            "question": self.n_questions,
            "part": self.n_parts,
            "explanation": self.n_explanation,
            "response": self.n_response,
            "elapsed": self.n_elapsed,
            "lag_s": self.n_lag_s,
            "lag_m": self.n_lag_m,
            "lag_d": self.n_lag_d,
        }

    def pad_id(self, stream: str) -> int:
        return self.sizes()[stream] - 1

    @classmethod
    def for_questions(cls, qmeta: Mapping[int, QuestionMeta]) -> "VocabSpec":
        return cls(n_questions=len(qmeta) + 1)


@dataclass(frozen=True)
class LagBuckets:
    """The same gap expressed at three granularities."""

    lag_s: int
    lag_m: int
    lag_d: int


def bucket_elapsed(prior_elapsed_ms: int | None) -> int:
    """Bucket the time spent answering the previous question into [0, 300] seconds."""
    if prior_elapsed_ms is None:
        return 0
    if prior_elapsed_ms < 0:
        raise ValueError(f"prior_elapsed_ms must be >= 0, got {prior_elapsed_ms}")
    return min(prior_elapsed_ms // MS_PER_SECOND, ELAPSED_CAP_S)


def compute_lag_buckets(prev_ts_ms: int, cur_ts_ms: int) -> LagBuckets:
    """Bucket the gap between consecutive interactions at second/minute/day granularity.

    Callers pass prev == cur for a user's first event (zero gap).
    """
    if cur_ts_ms < prev_ts_ms:
        raise ValueError(
            f"out-of-order history: current timestamp {cur_ts_ms} precedes previous {prev_ts_ms}"
        )
    dt = cur_ts_ms - prev_ts_ms
    return LagBuckets(
        lag_s=min(dt // MS_PER_SECOND, LAG_CAP_S),
        lag_m=min(dt // MS_PER_MINUTE, LAG_CAP_M),
        lag_d=min(dt // MS_PER_DAY, LAG_CAP_D),
    )


def encode_explanation(flag: bool | None) -> int:
    """Encode the saw-the-explanation flag: absent -> 0, False -> 1, True -> 2."""
    if flag is None:
        return 0
    return 2 if flag else 1


def encode_response_stream(correctness: Sequence[int]) -> list[int]:
    """Shift correctness right by one and offset: the decoder must never see
    the answer it is predicting. Position 0 carries the start token."""
    if len(correctness) == 0:
        raise ValueError("correctness sequence must be non-empty")
    return [RESPONSE_START] + [int(c) + 1 for c in correctness[:-1]]


@dataclass(frozen=True)
class EncodedWindow:
    """One left-padded, fixed-length token window for a single user.

    Eight token streams plus the prediction target and the pad mask, all of
    length max_seq. start_index is the offset of the window's first valid
    event within the user's full history.
    """

    user_id: int
    start_index: int
    question: np.ndarray
    part: np.ndarray
    explanation: np.ndarray
    response: np.ndarray
    elapsed: np.ndarray
    lag_s: np.ndarray
    lag_m: np.ndarray
    lag_d: np.ndarray
    target: np.ndarray
    valid: np.ndarray


def question_index(qmeta: Mapping[int, QuestionMeta]) -> dict[int, int]:
    """Dense token index for raw question ids (sorted-id order, deterministic)."""
    return {qid: i for i, qid in enumerate(sorted(qmeta))}


def window_offsets(n_events: int, max_seq: int, stride: int) -> list[int]:
    """Start offsets of the windows covering a history of n_events.

    Short histories yield a single window. Longer ones start at 0, stride,
    2*stride, ... and a final window is appended so coverage ends exactly at
    the last event.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if n_events <= max_seq:
        return [0]
    offsets = list(range(0, n_events - max_seq + 1, stride))
    if offsets[-1] != n_events - max_seq:
        offsets.append(n_events - max_seq)
    return offsets


def build_windows(
    history: UserHistory,
    qmeta: Mapping[int, QuestionMeta],
    spec: VocabSpec,
    max_seq: int = 100,
    stride: int = 100,
    qindex: Mapping[int, int] | None = None,
) -> list[EncodedWindow]:
    """Featurize one user's history into overlapping left-padded windows.

    Lag features are computed against the true previous event in the full
    history, never against a window boundary; only the user's very first
    event uses a zero gap. The response stream is window-local: each window
    restarts with the start token.
    """
    events = history.events
    if not events:
        raise ValueError(f"user {history.user_id}: history must be non-empty")
    if qindex is None:
        qindex = question_index(qmeta)

    n = len(events)
    q_ids = np.empty(n, dtype=np.int32)
    part_ids = np.empty(n, dtype=np.int32)
    expl_ids = np.empty(n, dtype=np.int32)
    elapsed_ids = np.empty(n, dtype=np.int32)
    lag_s_ids = np.empty(n, dtype=np.int32)
    lag_m_ids = np.empty(n, dtype=np.int32)
    lag_d_ids = np.empty(n, dtype=np.int32)
    targets = np.empty(n, dtype=np.uint8)

    for i, ev in enumerate(events):
        if ev.content_id not in qindex:
            raise KeyError(f"unknown content_id {ev.content_id} (not in the questions table)")
        q_ids[i] = qindex[ev.content_id]
        part_ids[i] = qmeta[ev.content_id].part - 1  # parts 1..7 -> tokens 0..6
        expl_ids[i] = encode_explanation(ev.prior_had_explanation)
        elapsed_ids[i] = bucket_elapsed(ev.prior_elapsed_ms)
        prev_ts = events[i - 1].timestamp_ms if i > 0 else ev.timestamp_ms
        lags = compute_lag_buckets(prev_ts, ev.timestamp_ms)
        lag_s_ids[i] = lags.lag_s
        lag_m_ids[i] = lags.lag_m
        lag_d_ids[i] = lags.lag_d
        targets[i] = ev.answered_correctly.value

    windows = []
    for offset in window_offsets(n, max_seq, stride):
        length = min(max_seq, n - offset)
        pad = max_seq - length
        sl = slice(offset, offset + length)

        def padded(values: np.ndarray, pad_value: int, dtype: type) -> np.ndarray:
            out = np.full(max_seq, pad_value, dtype=dtype)
            out[pad:] = values[sl]
            return out

        response = np.full(max_seq, spec.pad_id("response"), dtype=np.int32)
        response[pad:] = encode_response_stream(targets[sl].tolist())
        valid = np.zeros(max_seq, dtype=bool)
        valid[pad:] = True

        windows.append(EncodedWindow(
            user_id=history.user_id,
            start_index=offset,
            question=padded(q_ids, spec.pad_id("question"), np.int32),
            part=padded(part_ids, spec.pad_id("part"), np.int32),
            explanation=padded(expl_ids, spec.pad_id("explanation"), np.int32),
            response=response,
            elapsed=padded(elapsed_ids, spec.pad_id("elapsed"), np.int32),
            lag_s=padded(lag_s_ids, spec.pad_id("lag_s"), np.int32),
            lag_m=padded(lag_m_ids, spec.pad_id("lag_m"), np.int32),
            lag_d=padded(lag_d_ids, spec.pad_id("lag_d"), np.int32),
            target=padded(targets, 0, np.uint8),
            valid=valid,
        ))
    return windows


def last_window(
    history: UserHistory,
    qmeta: Mapping[int, QuestionMeta],
    spec: VocabSpec,
    max_seq: int = 100,
    qindex: Mapping[int, int] | None = None,
) -> EncodedWindow:
    """Inference-time view: only the most recent max_seq events of a user."""
    events = history.events[-max_seq:]
    trimmed = replace(history, events=events)
    # Recompute the first kept event's lag from the true predecessor.
    window = build_windows(trimmed, qmeta, spec, max_seq=max_seq, stride=max_seq, qindex=qindex)[0]
    dropped = len(history.events) - len(events)
    if dropped > 0:
        lags = compute_lag_buckets(
            history.events[dropped - 1].timestamp_ms, events[0].timestamp_ms
        )
        pad = max_seq - len(events)
        window.lag_s[pad] = lags.lag_s
        window.lag_m[pad] = lags.lag_m
        window.lag_d[pad] = lags.lag_d
        return replace(window, start_index=dropped)
    return window


@dataclass
class WindowBatch:
    """Stacked window streams, shape [n_windows, max_seq] per stream."""

    question: np.ndarray
    part: np.ndarray
    explanation: np.ndarray
    response: np.ndarray
    elapsed: np.ndarray
    lag_s: np.ndarray
    lag_m: np.ndarray
    lag_d: np.ndarray
    target: np.ndarray
    valid: np.ndarray
    user_id: np.ndarray    # [n_windows]
    start_index: np.ndarray  # [n_windows]

    def __len__(self) -> int:
        return self.question.shape[0]

    @property
    def max_seq(self) -> int:
        return self.question.shape[1]

    def select(self, indices: np.ndarray | Sequence[int]) -> "WindowBatch":
        idx = np.asarray(indices)
        return WindowBatch(**{
            name: getattr(self, name)[idx]
            for name in (*STREAM_NAMES, "user_id", "start_index")
        })

    @classmethod
    def from_windows(cls, windows: Sequence[EncodedWindow]) -> "WindowBatch":
        if not windows:
            raise ValueError("cannot stack an empty window list")
        return cls(
            **{name: np.stack([getattr(w, name) for w in windows]) for name in STREAM_NAMES},
            user_id=np.array([w.user_id for w in windows], dtype=np.int64),
            start_index=np.array([w.start_index for w in windows], dtype=np.int32),
        )


@dataclass
class EncodedDataset:
    """A WindowBatch plus the vocabulary it was encoded against."""

    vocab: VocabSpec
    max_seq: int
    windows: WindowBatch


def encode_histories(
    histories: Sequence[UserHistory],
    qmeta: Mapping[int, QuestionMeta],
    max_seq: int = 100,
    stride: int = 100,
) -> EncodedDataset:
    """Featurize many users into one dataset with a shared vocabulary."""
    spec = VocabSpec.for_questions(qmeta)
    qindex = question_index(qmeta)
    windows: list[EncodedWindow] = []
    for history in histories:
        windows.extend(build_windows(history, qmeta, spec, max_seq, stride, qindex))
    return EncodedDataset(vocab=spec, max_seq=max_seq, windows=WindowBatch.from_windows(windows))


def ablate_lag_streams(batch: WindowBatch) -> WindowBatch:
    """Replace all three lag-time streams with a constant id at valid positions.

    Used to measure how much of the model's accuracy the multi-granularity
    gap features carry.
    """
    out = batch.select(np.arange(len(batch)))
    for name in ("lag_s", "lag_m", "lag_d"):
        arr = getattr(out, name).copy()
        arr[batch.valid] = 0
        setattr(out, name, arr)
    return out


_STREAM_DTYPES = {name: "<i4" for name in STREAM_NAMES[:8]}
_STREAM_DTYPES["target"] = "|u1"
_STREAM_DTYPES["valid"] = "|u1"
_META_DTYPES = {"user_id": "<i8", "start_index": "<i4"}


def save_dataset(dataset: EncodedDataset, path: str | Path) -> None:
    """Write the binary container: magic, length-prefixed JSON manifest, then
    raw little-endian arrays in manifest order (row-major [window, position])."""
    batch = dataset.windows
    n = len(batch)
    arrays: list[tuple[str, np.ndarray, str]] = []
    for name in STREAM_NAMES:
        arrays.append((name, getattr(batch, name), _STREAM_DTYPES[name]))
    for name, dt in _META_DTYPES.items():
        arrays.append((name, getattr(batch, name), dt))
    manifest = {
        "format": "tempokt-dataset",
        "version": 1,
        "vocab": dataset.vocab.sizes(),
        "max_seq": dataset.max_seq,
        "n_windows": n,
        "arrays": [
            {"name": name, "dtype": dt, "shape": list(arr.shape)}
            for name, arr, dt in arrays
        ],
    }
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_DATASET_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for _, arr, dt in arrays:
            fh.write(np.ascontiguousarray(arr, dtype=np.dtype(dt)).tobytes())


def _read_manifest(fh: IO[bytes], magic: bytes, what: str) -> dict:
    got = fh.read(len(magic))
    if got != magic:
        raise ValueError(f"not a {what} file (bad magic {got!r})")
    (length,) = struct.unpack("<I", fh.read(4))
    return json.loads(fh.read(length).decode("utf-8"))


def load_dataset(path: str | Path) -> EncodedDataset:
    """Read a dataset container written by save_dataset."""
    with open(path, "rb") as fh:
        manifest = _read_manifest(fh, _DATASET_MAGIC, "tempokt dataset")
        fields: dict[str, np.ndarray] = {}
        for entry in manifest["arrays"]:
            dtype = np.dtype(entry["dtype"])
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(fh.read(count * dtype.itemsize), dtype=dtype)
            fields[entry["name"]] = data.reshape(shape).copy()
    fields["valid"] = fields["valid"].astype(bool)
    vocab = VocabSpec(**_vocab_kwargs(manifest["vocab"]))
    return EncodedDataset(
        vocab=vocab,
        max_seq=manifest["max_seq"],
        windows=WindowBatch(**fields),
    )


def _vocab_kwargs(sizes: Mapping[str, int]) -> dict[str, int]:
    mapping = {
        "question": "n_questions", "part": "n_parts", "explanation": "n_explanation",
        "response": "n_response", "elapsed": "n_elapsed",
        "lag_s": "n_lag_s", "lag_m": "n_lag_m", "lag_d": "n_lag_d",
    }
    return {mapping[k]: int(v) for k, v in sizes.items()}
