"""Round records, evaluation and CSV/JSON emission."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import channel as ch
from . import semantic_codec as sc
from . import tensor_core as tc
from .split_models import ModelSegment, segment_forward
from .streams import stream

EVAL_BATCH = 250


@dataclass
class RoundRecord:
    round: int
    regime: str
    train_loss: float
    test_accuracy: float
    feature_psnr: float  # NaN outside split regimes
    task_loss: float
    uplink_bytes: int  # forward-path payload: smashed data, labels (sfl) or weights (fl)
    downlink_bytes: int
    grad_uplink_bytes: int
    sync_bytes: int  # head/tail weight exchange for aggregation, both directions
    latency_s: float  # math.inf when a link has zero rate
    cr_histogram: str
    success: bool

    def __post_init__(self):
        if min(self.uplink_bytes, self.downlink_bytes, self.grad_uplink_bytes, self.sync_bytes) < 0:
            raise ValueError("byte counts must be non-negative")
        if not 0.0 <= self.test_accuracy <= 1.0:
            raise ValueError(f"accuracy {self.test_accuracy} outside [0, 1]")
        if not (self.latency_s > 0 or math.isinf(self.latency_s)):
            raise ValueError(f"latency must be positive or infinite, got {self.latency_s}")


CSV_COLUMNS = tuple(f.name for f in dataclasses.fields(RoundRecord))
SUMMED_COLUMNS = ("uplink_bytes", "downlink_bytes", "grad_uplink_bytes", "sync_bytes", "latency_s")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        if math.isinf(value):
            return "inf"
        return repr(value)
    return str(value)


def records_to_csv(records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in records:
        w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def write_csv(records, path) -> Path:
    path = Path(path)
    path.write_text(records_to_csv(records), encoding="utf-8")
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def summarize(records, deadline_s: float) -> dict:
    totals = {c: sum(getattr(r, c) for r in records) for c in SUMMED_COLUMNS}
    last = records[-1] if records else None
    return {
        "rounds": len(records),
        "regime": last.regime if last else None,
        "totals": {k: (v if math.isfinite(v) else "inf") for k, v in totals.items()},
        "final_test_accuracy": last.test_accuracy if last else None,
        "final_train_loss": last.train_loss if last else None,
        "task_success_probability": task_success(records, deadline_s),
        "deadline_s": deadline_s if math.isfinite(deadline_s) else "inf",
    }


def write_summary(records, deadline_s: float, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(summarize(records, deadline_s), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def task_success(records, deadline_s: float) -> float:
    """Fraction of rounds whose latency meets ``deadline_s``."""
    if not records:
        return 0.0
    lat = [r.latency_s if hasattr(r, "latency_s") else float(r) for r in records]
    return sum(1 for t in lat if t <= deadline_s) / len(lat)


# -- evaluation ---------------------------------------------------------------

@dataclass
class EvalResult:
    accuracy: float
    task_loss: float
    psnr: float  # NaN when no split/transmission is involved


def _fading_chain(features, codec, model, snr_db, rng):
    """Codec chain where every sample is its own block-fading transmission."""
    reals = [ch.sample_realization(model, snr_db, rng, noise_seed=0) for _ in range(features.shape[0])]
    out, _ = sc.codec_chain(features, codec, reals, rng)
    return out


def evaluate(segments, test, codec: sc.SemanticCodec | None = None, channel_model: str = "awgn",
             snr_db: float = math.inf, seed: int = 0, logits_fn=None) -> EvalResult:
    """Accuracy, mean cross-entropy and mean per-sample feature PSNR on ``test``.

    ``segments`` is either a single full-model segment or a (head, body, tail)
    triple. With a triple and a codec, head features are sent through the codec
    and channel before the body; without a codec the transfer is lossless.
    """
    if len(test) == 0:
        raise ValueError("evaluate needs a non-empty test set")
    split = isinstance(segments, (tuple, list))
    rng = stream(seed, "eval", channel_model, str(snr_db), str(codec.cr) if codec else "none")
    correct, loss_sum, psnrs = 0, 0.0, []
    for start in range(0, len(test), EVAL_BATCH):
        xb = test.x[start:start + EVAL_BATCH]
        yb = np.asarray(test.y[start:start + EVAL_BATCH]).view(np.ndarray)
        if logits_fn is not None:
            logits = logits_fn(xb)
        elif not split:
            logits, _ = segment_forward(segments, xb)
        else:
            head, body, tail = segments
            f, _ = segment_forward(head, xb)
            if codec is None:
                recon = f
            elif channel_model == "rayleigh":
                recon = _fading_chain(f, codec, channel_model, snr_db, rng)
            else:
                real = ch.ChannelRealization("awgn", snr_db, 1.0, 0)
                recon, _ = sc.codec_chain(f, codec, real, rng)
            psnrs.append(sc.psnr_per_sample(f, recon))
            b, _ = segment_forward(body, recon)
            logits, _ = segment_forward(tail, b)
        correct += int(np.sum(np.argmax(logits, axis=1) == yb))
        loss, _ = tc.softmax_cross_entropy(logits, yb)
        loss_sum += loss * len(yb)
    psnr = float(np.mean(np.concatenate(psnrs))) if psnrs else math.nan
    return EvalResult(correct / len(test), loss_sum / len(test), psnr)


def evaluate_ensemble(fulls: list[ModelSegment], test) -> EvalResult:
    """Mean metrics over independent per-client models (local regime)."""
    results = [evaluate(f, test) for f in fulls]
    return EvalResult(float(np.mean([r.accuracy for r in results])),
                      float(np.mean([r.task_loss for r in results])), math.nan)
