"""Synthetic labelled/unlabelled dataset generation and on-disk format.

The task is built so that the experimental contrasts of interest actually
exist at desk scale:

* Tokens come in confusable pairs.  Every frame of a token renders the
  pair's shared prefix vector except the last ``identity_frames`` frames,
  which render the token's own identity vector.  A causal encoder therefore
  cannot know which pair member it is hearing until the token is nearly
  over, while an encoder with look-ahead can tell at the token onset.
* The first frame of every token is scaled up (``onset_scale``), giving all
  models a cheap boundary detector so errors reflect identity, not
  segmentation.
* Token sequences follow a sparse Markov process of order ``markov_order``:
  given the context, exactly one member of every pair may follow (a token's
  own pair always contributes its partner, so immediate repeats never
  occur), drawn with Zipf-proportional probabilities.  Context therefore
  fully determines which pair member can occur.  A dedicated text-only
  split (``n_text`` sequences, no audio) plays the role of a large LM
  corpus: an n-gram model trained on it learns the process far better than
  the small prediction networks can from the labelled split, which is what
  makes shallow fusion genuinely informative.
* A fraction of tokens are homophone-like (``ambiguous_prob``): their
  identity frames render as ``ambiguous_gain`` times the identity vector
  plus the rest of the pair prefix, so at the default gain of zero the
  identity is simply withheld and both pair members sound the same.  Every
  frame still looks typical, so these decode as confident pair-member
  guesses; only sequence context can settle which member it was, which is
  the error class language-model fusion exists to fix.

The unlabelled split withholds transcripts from the regular files; a sealed
reference file exists only so evaluation can compute oracle WER.

On disk, a dataset directory holds per split: a JSON manifest of utterance
ids and byte offsets, a packed feature file of ``FEAT`` records, and (for
splits that carry transcripts) a JSON Lines transcript file.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .lattice import check_tokens

_FEAT_MAGIC = b"FEAT"

SPLITS = ("labelled", "unlabelled", "dev", "test")


@dataclass(frozen=True)
class SynthConfig:
    vocab_size: int = 7
    feature_dim: int = 8
    frames_per_token: int = 5
    identity_frames: int = 2
    noise: float = 0.6
    onset_scale: float = 2.0
    ambiguous_prob: float = 0.06
    ambiguous_gain: float = 0.0
    u_min: int = 3
    u_max: int = 5
    zipf_exponent: float = 1.3
    markov_order: int = 2
    n_labelled: int = 72
    n_unlabelled: int = 620
    n_dev: int = 48
    n_test: int = 48
    n_text: int = 4000
    jitter: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.vocab_size < 3 or self.vocab_size % 2 == 0:
            raise ConfigError("vocab_size must be odd and >= 3 (blank plus token pairs)")
        if self.feature_dim < 1 or self.frames_per_token < 1:
            raise ConfigError("feature_dim and frames_per_token must be positive")
        if not (1 <= self.identity_frames <= self.frames_per_token):
            raise ConfigError("need 1 <= identity_frames <= frames_per_token")
        if not (1 <= self.u_min <= self.u_max):
            raise ConfigError("need 1 <= u_min <= u_max")
        if self.noise < 0 or self.jitter < 0 or self.onset_scale <= 0:
            raise ConfigError("noise and jitter must be non-negative, onset_scale positive")
        if not (0 <= self.ambiguous_prob <= 1) or not (0 <= self.ambiguous_gain <= 1):
            raise ConfigError("ambiguous_prob and ambiguous_gain must lie in [0, 1]")
        if self.markov_order not in (0, 1, 2):
            raise ConfigError("markov_order must be 0, 1 or 2")
        if min(self.n_labelled, self.n_unlabelled, self.n_dev, self.n_test, self.n_text) < 0:
            raise ConfigError("split sizes must be non-negative")

    @property
    def n_tokens(self) -> int:
        return self.vocab_size - 1

    @property
    def n_pairs(self) -> int:
        return self.n_tokens // 2


@dataclass(frozen=True)
class Utterance:
    utt_id: str
    features: np.ndarray
    tokens: tuple[int, ...] | None
    split: str


@dataclass
class SynthDataset:
    config: SynthConfig
    splits: dict[str, list[Utterance]]
    sealed_refs: dict[str, tuple[int, ...]]
    token_means: np.ndarray
    pair_prefixes: np.ndarray
    text_corpus: list[tuple[int, ...]]


def zipf_prior(n_tokens: int, exponent: float) -> np.ndarray:
    w = np.arange(1, n_tokens + 1, dtype=np.float64) ** (-exponent)
    return w / w.sum()


def pair_partner(token: int) -> int:
    """The other member of a token's confusable pair (1<->2, 3<->4, ...)."""
    return token + 1 if token % 2 == 1 else token - 1


def successor_table(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Allowed successors per context: one member of every pair.

    Indexed ``[prev2, prev1 - 1, pair]`` where ``prev2`` is 0 at sequence
    start (or always, for a first-order process).  The slot for ``prev1``'s
    own pair is always its partner, so immediate repeats never occur; every
    other slot is drawn once per dataset.
    """
    ctx = cfg.n_tokens + 1 if cfg.markov_order == 2 else 1
    table = np.zeros((ctx, cfg.n_tokens, cfg.n_pairs), dtype=np.int64)
    for prev2 in range(ctx):
        for prev1 in range(1, cfg.n_tokens + 1):
            for pair in range(cfg.n_pairs):
                low, high = 2 * pair + 1, 2 * pair + 2
                if prev1 in (low, high):
                    table[prev2, prev1 - 1, pair] = pair_partner(prev1)
                else:
                    table[prev2, prev1 - 1, pair] = low if rng.integers(2) == 0 else high
    return table


def _sample_tokens(cfg: SynthConfig, rng: np.random.Generator, prior: np.ndarray,
                   successors: np.ndarray, length: int) -> tuple[int, ...]:
    token_ids = np.arange(1, cfg.vocab_size)
    tokens = [int(rng.choice(token_ids, p=prior))]
    while len(tokens) < length:
        if cfg.markov_order == 0:
            tokens.append(int(rng.choice(token_ids, p=prior)))
            continue
        prev2 = 0
        if cfg.markov_order == 2 and len(tokens) >= 2:
            prev2 = tokens[-2]
        allowed = successors[prev2 if cfg.markov_order == 2 else 0, tokens[-1] - 1]
        w = prior[allowed - 1]
        tokens.append(int(rng.choice(allowed, p=w / w.sum())))
    return tuple(tokens)


def generate(cfg: SynthConfig) -> SynthDataset:
    rng = np.random.default_rng(cfg.seed)
    means = rng.normal(0.0, 1.0, size=(cfg.n_tokens, cfg.feature_dim))
    prefixes = rng.normal(0.0, 1.0, size=(cfg.n_pairs, cfg.feature_dim))
    prior = zipf_prior(cfg.n_tokens, cfg.zipf_exponent)
    successors = successor_table(cfg, rng)

    counts = {
        "labelled": cfg.n_labelled,
        "unlabelled": cfg.n_unlabelled,
        "dev": cfg.n_dev,
        "test": cfg.n_test,
    }
    splits: dict[str, list[Utterance]] = {}
    sealed: dict[str, tuple[int, ...]] = {}
    for split in SPLITS:
        utts: list[Utterance] = []
        for i in range(counts[split]):
            utt_id = f"{split}-{i:05d}"
            u = int(rng.integers(cfg.u_min, cfg.u_max + 1))
            tokens = _sample_tokens(cfg, rng, prior, successors, u)
            blocks = []
            for tok in tokens:
                length = cfg.frames_per_token
                if cfg.jitter:
                    length += int(rng.integers(-cfg.jitter, cfg.jitter + 1))
                length = max(cfg.identity_frames + 1, length)
                identity = means[tok - 1]
                if rng.random() < cfg.ambiguous_prob:
                    g = cfg.ambiguous_gain
                    identity = g * means[tok - 1] + (1.0 - g) * prefixes[(tok - 1) // 2]
                block = np.empty((length, cfg.feature_dim))
                block[: length - cfg.identity_frames] = prefixes[(tok - 1) // 2]
                block[length - cfg.identity_frames :] = identity
                block[0] *= cfg.onset_scale
                block += rng.normal(0.0, cfg.noise, size=block.shape)
                blocks.append(block)
            X = np.vstack(blocks)
            if split == "unlabelled":
                sealed[utt_id] = tokens
                utts.append(Utterance(utt_id, X, None, split))
            else:
                utts.append(Utterance(utt_id, X, tokens, split))
        splits[split] = utts
    text = [
        _sample_tokens(cfg, rng, prior, successors, int(rng.integers(cfg.u_min, cfg.u_max + 1)))
        for _ in range(cfg.n_text)
    ]
    return SynthDataset(config=cfg, splits=splits, sealed_refs=sealed,
                        token_means=means, pair_prefixes=prefixes, text_corpus=text)


# ------------------------------------------------------------------- file I/O


def save_dataset(ds: SynthDataset, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w", encoding="utf-8") as f:
        json.dump(asdict(ds.config), f, sort_keys=True)
    np.save(out / "token_means.npy", ds.token_means)
    np.save(out / "pair_prefixes.npy", ds.pair_prefixes)
    for split, utts in ds.splits.items():
        entries = []
        with open(out / f"{split}.feat", "wb") as feat:
            for utt in utts:
                offset = feat.tell()
                T, d = utt.features.shape
                feat.write(_FEAT_MAGIC)
                feat.write(struct.pack("<II", T, d))
                feat.write(utt.features.astype("<f8").tobytes(order="C"))
                entries.append({"id": utt.utt_id, "offset": offset, "labelled": utt.tokens is not None})
        with open(out / f"{split}.json", "w", encoding="utf-8") as man:
            json.dump({"split": split, "utterances": entries}, man, sort_keys=True)
        if split != "unlabelled":
            with open(out / f"{split}.trans.jsonl", "w", encoding="utf-8") as trans:
                for utt in utts:
                    trans.write(json.dumps({"id": utt.utt_id, "tokens": list(utt.tokens)}) + "\n")
    with open(out / "unlabelled.refs.jsonl", "w", encoding="utf-8") as refs:
        for utt_id in sorted(ds.sealed_refs):
            refs.write(json.dumps({"id": utt_id, "tokens": list(ds.sealed_refs[utt_id])}) + "\n")
    with open(out / "text.jsonl", "w", encoding="utf-8") as text:
        for seq in ds.text_corpus:
            text.write(json.dumps({"tokens": list(seq)}) + "\n")


def _read_feat_record(f) -> np.ndarray:
    magic = f.read(4)
    if magic != _FEAT_MAGIC:
        raise ValueError(f"bad feature record magic {magic!r}")
    T, d = struct.unpack("<II", f.read(8))
    raw = f.read(T * d * 8)
    if len(raw) != T * d * 8:
        raise ValueError("truncated feature record")
    return np.frombuffer(raw, dtype="<f8").reshape(T, d).astype(np.float64)


def load_split(data_dir, split: str) -> list[Utterance]:
    base = Path(data_dir)
    with open(base / f"{split}.json", "r", encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest["split"] != split:
        raise ValueError(f"manifest mismatch: {manifest['split']} != {split}")
    transcripts: dict[str, tuple[int, ...]] = {}
    trans_path = base / f"{split}.trans.jsonl"
    if trans_path.exists():
        with open(trans_path, "r", encoding="utf-8") as f:
            for line in f:
                rec = json.loads(line)
                transcripts[rec["id"]] = check_tokens(rec["tokens"])
    utts: list[Utterance] = []
    with open(base / f"{split}.feat", "rb") as feat:
        for entry in manifest["utterances"]:
            feat.seek(entry["offset"])
            X = _read_feat_record(feat)
            tokens = transcripts.get(entry["id"]) if entry["labelled"] else None
            if entry["labelled"] and tokens is None:
                raise ValueError(f"missing transcript for labelled utterance {entry['id']}")
            utts.append(Utterance(entry["id"], X, tokens, split))
    return utts


def load_dataset(data_dir) -> SynthDataset:
    base = Path(data_dir)
    with open(base / "config.json", "r", encoding="utf-8") as f:
        cfg = SynthConfig(**json.load(f))
    splits = {split: load_split(base, split) for split in SPLITS}
    means = np.load(base / "token_means.npy")
    prefixes = np.load(base / "pair_prefixes.npy")
    return SynthDataset(config=cfg, splits=splits, sealed_refs={}, token_means=means,
                        pair_prefixes=prefixes, text_corpus=load_text(base))


def load_text(data_dir) -> list[tuple[int, ...]]:
    """The audio-free text split used to train the fusion LM."""
    out: list[tuple[int, ...]] = []
    with open(Path(data_dir) / "text.jsonl", "r", encoding="utf-8") as f:
        for line in f:
            if line.strip():
                out.append(check_tokens(json.loads(line)["tokens"]))
    return out


def load_sealed_refs(data_dir) -> dict[str, tuple[int, ...]]:
    """Oracle transcripts of the unlabelled split; for evaluation only."""
    refs: dict[str, tuple[int, ...]] = {}
    with open(Path(data_dir) / "unlabelled.refs.jsonl", "r", encoding="utf-8") as f:
        for line in f:
            rec = json.loads(line)
            refs[rec["id"]] = check_tokens(rec["tokens"])
    return refs
