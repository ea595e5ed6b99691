"""Feature files, split manifests, synthetic compositional worlds and batching."""

from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np

SPLITS = ("train", "val", "test")
HEADER = "czslfeat v1"
SECTIONS = ("states", "objects", "seen_pairs", "val_unseen_pairs", "test_unseen_pairs", "records")


class DataFormatError(ValueError):
    pass


class LabelPair(NamedTuple):
    state_id: Optional[int]
    object_id: Optional[int]


@dataclass(frozen=True)
class FeatureRecord:
    id: str
    feature: np.ndarray
    label: LabelPair
    split: str


@dataclass(frozen=True)
class SplitManifest:
    state_names: tuple
    object_names: tuple
    seen_pairs: frozenset
    val_unseen_pairs: frozenset
    test_unseen_pairs: frozenset

    def __post_init__(self):
        n_s, n_o = self.n_states, self.n_objects
        for label, pairs in (("seen", self.seen_pairs), ("val_unseen", self.val_unseen_pairs),
                             ("test_unseen", self.test_unseen_pairs)):
            for s, o in pairs:
                if not (0 <= s < n_s and 0 <= o < n_o):
                    raise DataFormatError(f"{label} pair ({s}, {o}) outside the {n_s}x{n_o} grid")
        for label, other in (("val_unseen", self.val_unseen_pairs), ("test_unseen", self.test_unseen_pairs)):
            both = self.seen_pairs & other
            if both:
                raise DataFormatError(f"pairs listed as both seen and {label}: {sorted(both)[:5]}")
        both = self.val_unseen_pairs & self.test_unseen_pairs
        if both:
            raise DataFormatError(f"pairs listed as both val_unseen and test_unseen: {sorted(both)[:5]}")

    @property
    def n_states(self):
        return len(self.state_names)

    @property
    def n_objects(self):
        return len(self.object_names)

    @property
    def full_space(self):
        return self.n_states * self.n_objects

    def unseen_pairs(self, split):
        return {"val": self.val_unseen_pairs, "test": self.test_unseen_pairs}[split]

    def pair_mask(self, pairs):
        m = np.zeros((self.n_states, self.n_objects), dtype=bool)
        for s, o in pairs:
            m[s, o] = True
        return m

    def seen_mask(self):
        return self.pair_mask(self.seen_pairs)

    def space_mask(self, setting, split="test"):
        """Candidate pairs: the full grid when open, seen plus the split's unseen pairs when closed."""
        if setting == "open":
            return np.ones((self.n_states, self.n_objects), dtype=bool)
        if setting == "closed":
            return self.pair_mask(self.seen_pairs | self.unseen_pairs(split))
        raise ValueError(f"unknown eval setting {setting!r}")


@dataclass(frozen=True)
class Dataset:
    """Column-oriented records; label -1 means absent."""

    ids: tuple
    features: np.ndarray
    states: np.ndarray
    objects: np.ndarray
    splits: np.ndarray
    feature_dim: int

    def __post_init__(self):
        n = len(self.ids)
        if self.features.shape != (n, self.feature_dim):
            raise DataFormatError(f"features shape {self.features.shape} != ({n}, {self.feature_dim})")
        if not np.all(np.isfinite(self.features)):
            raise DataFormatError("non-finite feature values")
        if np.any((self.states < 0) & (self.objects < 0)):
            raise DataFormatError("record with neither a state nor an object label")
        for a in (self.features, self.states, self.objects, self.splits):
            a.flags.writeable = False

    @classmethod
    def from_records(cls, records, feature_dim):
        records = list(records)
        feats = np.array([r.feature for r in records], dtype=np.float64).reshape(len(records), feature_dim)
        lab = lambda v: -1 if v is None else int(v)  # noqa: E731
        return cls(
            ids=tuple(r.id for r in records),
            features=feats,
            states=np.array([lab(r.label.state_id) for r in records], dtype=np.int64),
            objects=np.array([lab(r.label.object_id) for r in records], dtype=np.int64),
            splits=np.array([r.split for r in records], dtype="<U5"),
            feature_dim=feature_dim,
        )

    def __len__(self):
        return len(self.ids)

    def records(self):
        for i, rid in enumerate(self.ids):
            s, o = int(self.states[i]), int(self.objects[i])
            yield FeatureRecord(rid, self.features[i], LabelPair(None if s < 0 else s, None if o < 0 else o),
                                str(self.splits[i]))

    def indices(self, split):
        return np.flatnonzero(self.splits == split)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(tuple(self.ids[i] for i in idx), self.features[idx].copy(), self.states[idx].copy(),
                       self.objects[idx].copy(), self.splits[idx].copy(), self.feature_dim)

    def split(self, name):
        return self.subset(self.indices(name))

    def with_labels(self, states, objects):
        return replace(self, features=self.features.copy(), states=np.asarray(states, dtype=np.int64),
                       objects=np.asarray(objects, dtype=np.int64), splits=self.splits.copy())


class Batch(NamedTuple):
    features: np.ndarray
    states: np.ndarray
    objects: np.ndarray


def validate_labels(dataset, manifest):
    if np.any(dataset.states >= manifest.n_states) or np.any(dataset.states < -1):
        raise DataFormatError("state label outside the manifest's state list")
    if np.any(dataset.objects >= manifest.n_objects) or np.any(dataset.objects < -1):
        raise DataFormatError("object label outside the manifest's object list")


# ---------------------------------------------------------------------------
# feature file format


def _fmt(x):
    return repr(float(x))


def write_features(path, dataset, manifest):
    lines = [f"{HEADER} d={dataset.feature_dim}", "[states]", *manifest.state_names, "[objects]",
             *manifest.object_names]
    for name in ("seen_pairs", "val_unseen_pairs", "test_unseen_pairs"):
        lines.append(f"[{name}]")
        lines.extend(f"{s} {o}" for s, o in sorted(getattr(manifest, name)))
    lines.append("[records]")
    for i, rid in enumerate(dataset.ids):
        vals = ",".join(_fmt(v) for v in dataset.features[i])
        lines.append(f"{rid},{dataset.splits[i]},{dataset.states[i]},{dataset.objects[i]},{vals}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")


def load_features(path):
    """Parse a feature file into ``(Dataset, SplitManifest)``."""
    with open(path, encoding="utf-8") as fh:
        raw = [ln.rstrip("\n") for ln in fh]
    lines = [(i + 1, ln.strip()) for i, ln in enumerate(raw)]
    lines = [(n, ln) for n, ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise DataFormatError("empty feature file")
    n0, head = lines[0]
    parts = head.split()
    if len(parts) != 3 or " ".join(parts[:2]) != HEADER or not parts[2].startswith("d="):
        raise DataFormatError(f"line {n0}: malformed header {head!r}")
    try:
        d = int(parts[2][2:])
    except ValueError:
        raise DataFormatError(f"line {n0}: malformed dimension in header {head!r}") from None
    if d < 1:
        raise DataFormatError(f"line {n0}: dimension must be positive")

    body = {name: [] for name in SECTIONS}
    current = None
    for n, ln in lines[1:]:
        if ln.startswith("[") and ln.endswith("]"):
            current = ln[1:-1]
            if current not in body:
                raise DataFormatError(f"line {n}: unknown section {ln}")
            continue
        if current is None:
            raise DataFormatError(f"line {n}: content before the first section")
        body[current].append((n, ln))

    states = tuple(ln for _, ln in body["states"])
    objects = tuple(ln for _, ln in body["objects"])

    def pairs(section):
        out = set()
        for n, ln in body[section]:
            bits = ln.split()
            if len(bits) != 2:
                raise DataFormatError(f"line {n}: expected 'state_index object_index'")
            try:
                s, o = int(bits[0]), int(bits[1])
            except ValueError:
                raise DataFormatError(f"line {n}: non-integer pair {ln!r}") from None
            if not (0 <= s < len(states) and 0 <= o < len(objects)):
                raise DataFormatError(f"line {n}: pair ({s}, {o}) names an unknown class")
            out.add((s, o))
        return frozenset(out)

    manifest = SplitManifest(states, objects, pairs("seen_pairs"), pairs("val_unseen_pairs"),
                             pairs("test_unseen_pairs"))

    ids, splits, st, ob, feats = [], [], [], [], []
    for n, ln in body["records"]:
        bits = ln.split(",")
        if len(bits) != 4 + d:
            raise DataFormatError(f"line {n}: expected {4 + d} fields, got {len(bits)}")
        if bits[1] not in SPLITS:
            raise DataFormatError(f"line {n}: unknown split {bits[1]!r}")
        try:
            s, o = int(bits[2]), int(bits[3])
            vec = [float(x) for x in bits[4:]]
        except ValueError:
            raise DataFormatError(f"line {n}: unparsable record") from None
        if not (-1 <= s < len(states)) or not (-1 <= o < len(objects)):
            raise DataFormatError(f"line {n}: label names an unknown class")
        ids.append(bits[0])
        splits.append(bits[1])
        st.append(s)
        ob.append(o)
        feats.append(vec)
    dataset = Dataset(tuple(ids), np.array(feats, dtype=np.float64).reshape(len(ids), d),
                      np.array(st, dtype=np.int64), np.array(ob, dtype=np.int64),
                      np.array(splits, dtype="<U5"), d)
    return dataset, manifest


def openworld_expansion_ratio(manifest, dataset=None, split="test"):
    """Size of the full grid over the size of the closed-world output space.

    The closed space is the split's unseen pairs plus the seen pairs; when a
    dataset is given only seen pairs that occur in that split count.
    """
    seen = set(manifest.seen_pairs)
    if dataset is not None:
        idx = dataset.indices(split)
        seen &= set(zip(dataset.states[idx].tolist(), dataset.objects[idx].tolist()))
    closed = seen | set(manifest.unseen_pairs(split))
    if not closed:
        raise ValueError("closed-world output space is empty")
    return manifest.full_space / len(closed)


def split_stats(dataset, manifest):
    """Per-split counts laid out like the usual CZSL statistics table."""
    out = {"s": manifest.n_states, "o": manifest.n_objects, "C": manifest.full_space}
    for split in SPLITS:
        idx = dataset.indices(split)
        pairs = set(zip(dataset.states[idx].tolist(), dataset.objects[idx].tolist()))
        out[f"{split}_Cs"] = len(pairs & manifest.seen_pairs)
        out[f"{split}_Cu"] = len(pairs - manifest.seen_pairs) if split != "train" else 0
        out[f"{split}_I"] = int(idx.size)
    return out


# ---------------------------------------------------------------------------
# synthetic worlds


@dataclass(frozen=True)
class SyntheticWorldConfig:
    n_states: int = 16
    n_objects: int = 12
    feature_dim: int = 64
    feasibility_density: float = 0.6
    seen_fraction: float = 0.7217
    samples_per_seen_pair: int = 20
    eval_samples_per_pair: int = 5
    noise_sigma: float = 1.0
    seed: int = 0
    # "random": feasible pairs are a random subset of the grid.
    # "object_determined": objects and states are dealt into `n_families`
    # families and only same-family pairs are feasible (block-diagonal map);
    # object prototypes share a family component with weight `family_share`.
    structure: str = "random"
    n_families: int = 4
    family_share: float = 0.5
    state_signal: float = 1.0
    object_signal: float = 1.0

    def __post_init__(self):
        if self.n_states < 1 or self.n_objects < 1 or self.feature_dim < 1:
            raise ValueError("n_states, n_objects and feature_dim must be positive")
        if not 0 < self.feasibility_density <= 1:
            raise ValueError("feasibility_density must be in (0, 1]")
        if not 0 <= self.seen_fraction <= 1:
            raise ValueError("seen_fraction must be in [0, 1]")
        if self.structure not in ("random", "object_determined"):
            raise ValueError(f"unknown world structure {self.structure!r}")
        if self.samples_per_seen_pair < 1 or self.eval_samples_per_pair < 1:
            raise ValueError("sample counts must be positive")


def _random_feasibility(cfg, rng):
    S, O = cfg.n_states, cfg.n_objects
    n_feasible = max(2, int(round(cfg.feasibility_density * S * O)))
    # a covering diagonal keeps every state and object feasible somewhere
    ps, po = rng.permutation(S), rng.permutation(O)
    cover = []
    for i in range(max(S, O)):
        pair = (int(ps[i % S]), int(po[i % O]))
        if pair not in cover:
            cover.append(pair)
    cover = cover[:n_feasible]
    rest = [(s, o) for s in range(S) for o in range(O) if (s, o) not in set(cover)]
    extra = rng.permutation(len(rest))[: n_feasible - len(cover)]
    feasible = cover + [rest[i] for i in sorted(extra)]
    n_seen = int(round(cfg.seen_fraction * len(feasible)))
    if n_seen >= len(cover):
        others = feasible[len(cover):]
        pick = rng.permutation(len(others))[: n_seen - len(cover)]
        seen = cover + [others[i] for i in sorted(pick)]
    else:
        pick = rng.permutation(len(feasible))[:n_seen]
        seen = [feasible[i] for i in sorted(pick)]
    return feasible, seen


def _block_feasibility(cfg, rng):
    """Objects and states are dealt into families; a pair is feasible iff both share a family."""
    S, O, F = cfg.n_states, cfg.n_objects, cfg.n_families
    if not 1 <= F <= min(S, O):
        raise ValueError("n_families must be in [1, min(n_states, n_objects)]")
    state_family = np.empty(S, dtype=np.int64)
    object_family = np.empty(O, dtype=np.int64)
    state_family[rng.permutation(S)] = np.arange(S) % F
    object_family[rng.permutation(O)] = np.arange(O) % F
    feasible, seen = [], []
    for f in range(F):
        fs = [int(s) for s in np.flatnonzero(state_family == f)]
        fo = [int(o) for o in np.flatnonzero(object_family == f)]
        block = [(s, o) for s in fs for o in fo]
        cover = []
        for i in range(max(len(fs), len(fo))):
            pair = (fs[i % len(fs)], fo[i % len(fo)])
            if pair not in cover:
                cover.append(pair)
        rest = [p for p in block if p not in set(cover)]
        n_seen = max(len(cover), int(round(cfg.seen_fraction * len(block))))
        pick = rng.permutation(len(rest))[: n_seen - len(cover)]
        feasible.extend(block)
        seen.extend(cover + [rest[i] for i in sorted(pick)])
    return feasible, seen, object_family


def generate_synthetic_world(cfg):
    """Build ``(Dataset, SplitManifest, feasibility)`` deterministically from ``cfg.seed``.

    A feature for pair (s, o) is ``state_signal * proto_s + object_signal * proto_o``
    plus isotropic Gaussian noise (sigma = ``noise_sigma``). Train records come
    from seen pairs only; val/test hold every seen pair plus their own unseen pairs.
    """
    rng = np.random.default_rng(cfg.seed)
    object_family = None
    if cfg.structure == "random":
        feasible, seen = _random_feasibility(cfg, rng)
    else:
        feasible, seen, object_family = _block_feasibility(cfg, rng)
    unseen = [p for p in feasible if p not in set(seen)]
    if len(unseen) < 1:
        raise ValueError("configuration leaves no unseen feasible pairs")
    order = rng.permutation(len(unseen))
    n_val = len(unseen) // 2
    val_unseen = sorted(unseen[i] for i in order[:n_val])
    test_unseen = sorted(unseen[i] for i in order[n_val:])

    S, O, d = cfg.n_states, cfg.n_objects, cfg.feature_dim
    proto_s = rng.standard_normal((S, d))
    proto_o = rng.standard_normal((O, d))
    if object_family is not None:
        w = cfg.family_share
        proto_o = np.sqrt(w) * rng.standard_normal((cfg.n_families, d))[object_family] + np.sqrt(1 - w) * proto_o
    manifest = SplitManifest(tuple(f"state{i}" for i in range(S)), tuple(f"object{i}" for i in range(O)),
                             frozenset(seen), frozenset(val_unseen), frozenset(test_unseen))

    plan = [("train", p, cfg.samples_per_seen_pair) for p in sorted(seen)]
    for split, unseen_split in (("val", val_unseen), ("test", test_unseen)):
        plan += [(split, p, cfg.eval_samples_per_pair) for p in sorted(seen) + list(unseen_split)]
    n = sum(c for _, _, c in plan)
    feats = np.empty((n, d))
    states = np.empty(n, dtype=np.int64)
    objects = np.empty(n, dtype=np.int64)
    splits, ids = [], []
    row = 0
    for split, (s, o), count in plan:
        noise = rng.standard_normal((count, d)) * cfg.noise_sigma
        feats[row:row + count] = cfg.state_signal * proto_s[s] + cfg.object_signal * proto_o[o] + noise
        states[row:row + count] = s
        objects[row:row + count] = o
        for j in range(count):
            ids.append(f"{split}-{s}-{o}-{j}")
            splits.append(split)
        row += count
    dataset = Dataset(tuple(ids), feats, states, objects, np.array(splits, dtype="<U5"), d)
    feasibility = manifest.pair_mask(feasible)
    return dataset, manifest, feasibility


def mask_partial_labels(dataset, keep_state_fraction, keep_object_fraction, seed, splits=("train",)):
    """Drop state/object labels at random on the given splits.

    One uniform draw u per record: the state survives when u < keep_state,
    the object when u >= 1 - keep_object. That hits both keep fractions
    exactly whenever they sum to at least 1 (at (0.5, 0.5) every record ends
    up with exactly one label). Records falling in the gap between the two
    intervals would lose both and keep one, chosen by a fair coin.
    """
    for f in (keep_state_fraction, keep_object_fraction):
        if not 0 <= f <= 1:
            raise ValueError("keep fractions must be in [0, 1]")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    u = rng.random(n)
    coin = rng.random(n) < 0.5
    keep_s = u < keep_state_fraction
    keep_o = u >= 1 - keep_object_fraction
    lost = ~keep_s & ~keep_o
    keep_s |= lost & coin
    keep_o |= lost & ~coin
    active = np.isin(dataset.splits, list(splits))
    states = np.where(active & ~keep_s, -1, dataset.states)
    objects = np.where(active & ~keep_o, -1, dataset.objects)
    # never strip the only label a record already had
    both_gone = (states < 0) & (objects < 0)
    states = np.where(both_gone, dataset.states, states)
    objects = np.where(both_gone, dataset.objects, objects)
    return dataset.with_labels(states, objects)


def batch_iterator(dataset, split, batch_size, seed, epoch):
    """Yield shuffled batches of one split; the order depends only on (seed, epoch)."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    idx = dataset.indices(split)
    if idx.size == 0:
        raise ValueError(f"split {split!r} is empty")
    seed = tuple(seed) if isinstance(seed, (tuple, list)) else (seed,)
    rng = np.random.default_rng([*seed, epoch])
    idx = idx[rng.permutation(idx.size)]
    for start in range(0, idx.size, batch_size):
        sel = idx[start:start + batch_size]
        yield Batch(dataset.features[sel], dataset.states[sel], dataset.objects[sel])
