"""Experiment harness: training loops, target generation, evaluation, benchmarks.

The same trainer serves the teacher and every student configuration; a
baseline student is simply the trainer with distillation weight zero on the
labelled split.  Student strategies:

* ``baseline``   labelled data only, no distillation,
* ``pseudo``     labelled transcripts plus teacher pseudo-transcriptions, no
                 distillation term,
* ``st1``        distillation from scratch,
* ``st2``        distillation starting from an existing checkpoint (usually
                 the pseudo or baseline model).

Per-utterance gradient work fans out to a thread pool capped by the
``TDKD_THREADS`` environment variable; reductions always run in utterance
order, so results do not depend on the worker count.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .corpus import Utterance, load_sealed_refs, load_split
from .decoding import Hypothesis, beam_decode, greedy_decode, wer
from .errors import ConfigError, NumericError
from .kd import (
    KdConfig,
    KdTargetSet,
    collapse_lattice,
    fuse_targets,
    kd_collapsed,
    kd_collapsed_grad,
    kd_full_lattice,
    kd_full_lattice_grad,
    kd_one_best,
    kd_one_best_grad,
    make_target_set,
)
from .lattice import random_lattice
from .lm import NgramLm, step_dist
from .nnet import (
    ModelConfig,
    TransducerModel,
    backward,
    forward_lattice,
    forward_with_tape,
    init_model,
    sgd_step,
)
from .transducer import transducer_nll, transducer_nll_grad, viterbi_alignment

STRATEGIES = ("baseline", "pseudo", "st1", "st2")


def worker_count() -> int:
    return max(1, int(os.environ.get("TDKD_THREADS", "1")))


def ordered_map(fn: Callable, items: Sequence) -> list:
    """Map with deterministic output order regardless of worker count."""
    workers = worker_count()
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


@dataclass(frozen=True)
class TrainSchedule:
    epochs: int = 15
    lr: float = 0.15
    lr_decay: float = 0.97
    batch_size: int = 4
    clip: float = 5.0
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    data_dir: str
    model: ModelConfig
    kd: KdConfig
    schedule: TrainSchedule
    strategy: str = "baseline"
    init_checkpoint: str | None = None
    pseudo_nll: bool = True

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "st2" and not self.init_checkpoint:
            raise ConfigError("st2 requires an init checkpoint")
        if self.strategy in ("baseline", "pseudo") and self.kd.lam != 0:
            raise ConfigError(f"strategy {self.strategy!r} forces lambda = 0")
        if self.strategy in ("st1", "st2") and self.kd.lam == 0:
            raise ConfigError("distillation strategies need lambda > 0")


@dataclass
class TrainItem:
    utt_id: str
    features: np.ndarray
    tokens: tuple[int, ...]
    labelled: bool
    target: KdTargetSet | None = None


@dataclass
class EvalResult:
    wer: float
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int
    mean_emission_frame: float


# ------------------------------------------------------------------- training


def _utterance_loss_grad(model: TransducerModel, item: TrainItem, kd_cfg: KdConfig,
                         teacher: TransducerModel | None, apply_nll: bool):
    lat, tape = forward_with_tape(model, item.features, item.tokens)
    loss = 0.0
    lattice_grad = np.zeros_like(lat.values)
    if apply_nll:
        nll, _ = transducer_nll(lat, item.tokens)
        loss += nll
        lattice_grad += transducer_nll_grad(lat, item.tokens)
    if kd_cfg.lam > 0:
        if kd_cfg.variant == "one_best":
            if item.target is None:
                raise ConfigError(f"no cached target for utterance {item.utt_id}")
            kd_loss = kd_one_best(item.target, lat, kd_cfg.tau)
            kd_grad = kd_one_best_grad(item.target, lat, kd_cfg.tau)
        else:
            if teacher is None:
                raise ConfigError(f"variant {kd_cfg.variant!r} needs the teacher model")
            t_lat = forward_lattice(teacher, item.features, item.tokens)
            if kd_cfg.variant == "full_lattice":
                kd_loss = kd_full_lattice(t_lat, lat)
                kd_grad = kd_full_lattice_grad(t_lat, lat)
            else:
                ct = collapse_lattice(t_lat, item.tokens)
                kd_loss = kd_collapsed(ct, lat, item.tokens)
                kd_grad = kd_collapsed_grad(ct, lat, item.tokens)
        loss += kd_cfg.lam * kd_loss
        lattice_grad += kd_cfg.lam * kd_grad
    return loss, backward(model, item.features, item.tokens, lattice_grad, tape)


def train_transducer(
    model_cfg: ModelConfig,
    items: Sequence[TrainItem],
    schedule: TrainSchedule,
    kd_cfg: KdConfig,
    dev: Sequence[Utterance],
    init: TransducerModel | None = None,
    teacher: TransducerModel | None = None,
    pseudo_nll: bool = True,
    log: Callable[[str], None] | None = None,
) -> tuple[TransducerModel, list[dict]]:
    """SGD over per-utterance lattices; keeps the best dev-WER parameters."""
    if not items:
        raise ConfigError("no training utterances")
    model = init.clone() if init is not None else init_model(model_cfg, schedule.seed)
    if init is not None and init.config != model_cfg:
        raise ConfigError("init checkpoint does not match the model configuration")
    shuffle_rng = np.random.default_rng(schedule.seed + 1)
    best_wer = float("inf")
    best_params = model.params.copy()
    history: list[dict] = []
    lr = schedule.lr
    for epoch in range(schedule.epochs):
        order = shuffle_rng.permutation(len(items))
        epoch_loss = 0.0
        for start in range(0, len(order), schedule.batch_size):
            batch = [items[i] for i in order[start : start + schedule.batch_size]]
            results = ordered_map(
                lambda it: _utterance_loss_grad(model, it, kd_cfg, teacher,
                                                apply_nll=it.labelled or pseudo_nll),
                batch,
            )
            grad = sum(g for _, g in results) / len(batch)
            batch_loss = sum(l for l, _ in results) / len(batch)
            if not np.isfinite(batch_loss):
                raise NumericError(f"training diverged at epoch {epoch}: loss {batch_loss}")
            epoch_loss += batch_loss * len(batch)
            sgd_step(model, grad, lr, schedule.clip)
        dev_wer = evaluate(model, dev).wer
        history.append({"epoch": epoch, "loss": epoch_loss / len(items), "dev_wer": dev_wer, "lr": lr})
        if log:
            log(f"epoch {epoch:3d}  loss {epoch_loss / len(items):9.4f}  dev_wer {dev_wer:.4f}")
        if dev_wer < best_wer:
            best_wer = dev_wer
            best_params = model.params.copy()
        lr *= schedule.lr_decay
    model.params[:] = best_params
    model.version += 1
    return model, history


def build_train_items(
    data_dir,
    strategy: str,
    targets: dict[str, KdTargetSet] | None,
    pseudo: dict[str, tuple[int, ...]] | None,
    use_unlabelled: bool,
) -> list[TrainItem]:
    """Assemble the training set a strategy sees."""
    items = [
        TrainItem(u.utt_id, u.features, u.tokens, labelled=True,
                  target=targets.get(u.utt_id) if targets else None)
        for u in load_split(data_dir, "labelled")
    ]
    if strategy != "baseline" and use_unlabelled:
        if pseudo is None:
            raise ConfigError("unlabelled training needs pseudo-transcriptions")
        for u in load_split(data_dir, "unlabelled"):
            if u.utt_id not in pseudo:
                continue
            items.append(
                TrainItem(u.utt_id, u.features, pseudo[u.utt_id], labelled=False,
                          target=targets.get(u.utt_id) if targets else None)
            )
    return items


# ----------------------------------------------------------- target generation


def generate_targets(
    teacher: TransducerModel,
    data_dir,
    include_unlabelled: bool = True,
    lm: NgramLm | None = None,
    beta: float = 0.0,
    beam: int = 4,
) -> tuple[list[KdTargetSet], dict[str, tuple[int, ...]]]:
    """One-best teacher targets for the labelled (and optionally unlabelled) split.

    Labelled utterances align against their ground-truth transcription; for
    unlabelled data the transcription is the teacher's beam-search one-best,
    decoded with shallow fusion when ``beta > 0``.  With ``beta > 0`` the
    cached node distributions are LM-fused as well.
    """
    use_lm = lm is not None and beta > 0.0

    def one_target(utt: Utterance, tokens: tuple[int, ...]) -> KdTargetSet:
        lat = forward_lattice(teacher, utt.features, tokens)
        align, _ = viterbi_alignment(lat, tokens)
        target = make_target_set(utt.utt_id, lat, align)
        if use_lm:
            lm_dists = np.vstack([step_dist(lm, tokens[:u]) for _, u, _ in align.steps])
            target = fuse_targets(target, lm_dists, beta)
        return target

    labelled = load_split(data_dir, "labelled")
    targets = ordered_map(lambda u: one_target(u, u.tokens), labelled)
    pseudo: dict[str, tuple[int, ...]] = {}
    if include_unlabelled:
        unlabelled = load_split(data_dir, "unlabelled")

        def transcribe(utt: Utterance) -> tuple[int, ...]:
            hyps = beam_decode(teacher, utt.features, beam, lm=lm if use_lm else None, beta=beta)
            return hyps[0].tokens

        hyps = ordered_map(transcribe, unlabelled)
        for utt, tokens in zip(unlabelled, hyps):
            pseudo[utt.utt_id] = tokens
            targets.append(one_target(utt, tokens))
    return targets, pseudo


def save_pseudo(pseudo: dict[str, tuple[int, ...]], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for utt_id in sorted(pseudo):
            f.write(json.dumps({"id": utt_id, "tokens": list(pseudo[utt_id])}) + "\n")


def load_pseudo(path) -> dict[str, tuple[int, ...]]:
    out: dict[str, tuple[int, ...]] = {}
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                out[rec["id"]] = tuple(int(t) for t in rec["tokens"])
    return out


# ----------------------------------------------------------------- evaluation


def evaluate(
    model: TransducerModel,
    utts: Sequence[Utterance],
    refs: dict[str, tuple[int, ...]] | None = None,
    beam: int = 0,
    lm: NgramLm | None = None,
    beta: float = 0.0,
) -> EvalResult:
    """Decode a split and score micro-averaged WER against its references."""

    def decode(utt: Utterance) -> Hypothesis:
        if beam and beam > 1:
            return beam_decode(model, utt.features, beam, lm=lm, beta=beta)[0]
        return greedy_decode(model, utt.features)

    hyps = ordered_map(decode, utts)
    s = d = i = n = 0
    frames: list[float] = []
    for utt, hyp in zip(utts, hyps):
        ref = utt.tokens if utt.tokens is not None else (refs or {}).get(utt.utt_id)
        if ref is None:
            raise ConfigError(f"no reference for utterance {utt.utt_id}")
        rep = wer(ref, hyp.tokens)
        s += rep.substitutions
        d += rep.deletions
        i += rep.insertions
        n += rep.ref_len
        frames.extend(hyp.emission_frames)
    mean_frame = float(np.mean(frames)) if frames else float("nan")
    return EvalResult(wer=(s + d + i) / n if n else 0.0, substitutions=s, deletions=d,
                      insertions=i, ref_len=n, mean_emission_frame=mean_frame)


def eval_split(model, data_dir, split: str, beam: int = 0, lm=None, beta: float = 0.0) -> EvalResult:
    utts = load_split(data_dir, split)
    refs = load_sealed_refs(data_dir) if split == "unlabelled" else None
    return evaluate(model, utts, refs=refs, beam=beam, lm=lm, beta=beta)


# -------------------------------------------------------------- results table


RESULT_FIELDS = ("label", "dev_wer", "test_wer", "baseline", "werr_dev", "werr_test")


def append_result(path, label: str, dev_wer: float, test_wer: float, baseline: str = "") -> dict:
    """Append one row; WERR columns are computed against the named baseline row."""
    path = Path(path)
    rows = read_results(path) if path.exists() else []
    werr_dev = werr_test = ""
    if baseline:
        base = next((r for r in rows if r["label"] == baseline), None)
        if base is None:
            raise ConfigError(f"baseline row {baseline!r} not found in {path}")
        werr_dev = repr(_werr(float(base["dev_wer"]), dev_wer))
        werr_test = repr(_werr(float(base["test_wer"]), test_wer))
    row = {
        "label": label,
        "dev_wer": repr(dev_wer),
        "test_wer": repr(test_wer),
        "baseline": baseline,
        "werr_dev": werr_dev,
        "werr_test": werr_test,
    }
    write_header = not path.exists()
    with open(path, "a", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=RESULT_FIELDS)
        if write_header:
            writer.writeheader()
        writer.writerow(row)
    return row


def _werr(base: float, new: float) -> float:
    return (base - new) / base if base else 0.0


def read_results(path) -> list[dict]:
    with open(path, "r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def render_results(path) -> str:
    rows = read_results(path)
    header = f"{'configuration':<40} {'dev WER':>9} {'test WER':>9} {'WERR(dev)':>10}"
    lines = [header, "-" * len(header)]
    for r in rows:
        werr = f"{float(r['werr_dev']):+.1%}" if r["werr_dev"] else "-"
        lines.append(
            f"{r['label']:<40} {float(r['dev_wer']):>9.4f} {float(r['test_wer']):>9.4f} {werr:>10}"
        )
    return "\n".join(lines)


# ------------------------------------------------------------------ benchmark


@dataclass(frozen=True)
class BenchRecord:
    variant: str
    T: int
    U: int
    K: int
    stored_values: int
    seconds: float


def bench_variants(grid: Iterable[tuple[int, int, int]], seed: int = 0, repeats: int = 3) -> list[BenchRecord]:
    """Measure stored target sizes and loss evaluation time per variant."""
    rng = np.random.default_rng(seed)
    records: list[BenchRecord] = []
    for T, U, K in grid:
        teacher = random_lattice(rng, T, U, K)
        student = random_lattice(rng, T, U, K)
        y = tuple(int(rng.integers(1, K)) for _ in range(U))
        align, _ = viterbi_alignment(teacher, y)
        target = make_target_set(f"bench-{T}-{U}-{K}", teacher, align)
        ct = collapse_lattice(teacher, y)
        cases = {
            "one_best": (target.stored_values, lambda: kd_one_best(target, student, 0)),
            "full_lattice": (teacher.values.size, lambda: kd_full_lattice(teacher, student)),
            "collapsed": (ct.stored_values, lambda: kd_collapsed(ct, student, y)),
        }
        for variant, (stored, fn) in cases.items():
            t0 = time.perf_counter()
            for _ in range(repeats):
                fn()
            dt = (time.perf_counter() - t0) / repeats
            records.append(BenchRecord(variant, T, U, K, int(stored), dt))
    return records


def save_bench(records: Sequence[BenchRecord], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["variant", "T", "U", "K", "stored_values", "seconds"])
        for r in records:
            writer.writerow([r.variant, r.T, r.U, r.K, r.stored_values, repr(r.seconds)])


def fit_memory_exponent(records: Sequence[BenchRecord], variant: str, size_of: Callable[[BenchRecord], float]) -> float:
    """Slope of log(stored values) against log(size) for one variant."""
    pts = [(size_of(r), r.stored_values) for r in records if r.variant == variant]
    if len(pts) < 2:
        raise ValueError("need at least two grid points")
    xs = np.log([p[0] for p in pts])
    ys = np.log([p[1] for p in pts])
    slope, _ = np.polyfit(xs, ys, 1)
    return float(slope)
