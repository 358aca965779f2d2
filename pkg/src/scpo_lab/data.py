"""Synthetic minimally-contrastive preference data and its file format.

Dataset file layout (UTF-8, one JSON object per line, ``\\n`` endings)::

    {"format": "scpo-dataset", "version": 1, "float_mode": "hex",
     "n_images": ..., "n_queries": ..., "n_pairs": ..., "provenance": {...}}
    {"kind": "image", "image_id": ..., "embedding": [hex...],
     "patch_features": [[hex...], ...], "patch_positions": [[hex, hex], ...]}
    ...
    {"kind": "query", "query_id": ...}
    ...
    {"kind": "pair", "pair_id": ..., "query_id": ..., "chosen_image": ...,
     "rejected_image": ..., "chosen_response": ..., "rejected_response": ...}
    ...

Sections appear in the order image, query, pair. Floats are
``float.hex`` strings so a round trip is bit-exact.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .difficulty import ImageRecord
from .model import Context, PolicyTable
from .objectives import PreferencePair

DATASET_FORMAT = "scpo-dataset"
DATASET_VERSION = 1
THETA_MAX = math.pi / 2

# child streams of the top-level seed
STREAM_DATA = 0
STREAM_BASE_POLICY = 1
STREAM_TRAINING = 2


def seed_stream(seed: int, stream: int) -> np.random.Generator:
    """Independent generator for one named use of a top-level seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream,)))


class DatasetFormatError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)
        self.line = line


class IntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    n_pairs: int = 600
    embedding_dim: int = 16
    patch_count: int = 9
    patch_dim: int = 8
    # per-pair perturbation scale drawn uniformly from [delta_min, delta_max]
    delta_min: float = 0.1
    delta_max: float = 1.0
    response_vocab_size: int = 8
    seed: int = 0

    def __post_init__(self):
        for name in ("n_pairs", "embedding_dim", "patch_count", "patch_dim", "response_vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be at least 2 to rotate embeddings")
        if not 0 <= self.delta_min <= self.delta_max:
            raise ValueError(f"need 0 <= delta_min <= delta_max, got {self.delta_min}, {self.delta_max}")
        if self.response_vocab_size < 2:
            raise ValueError("response_vocab_size must be >= 2 for distinct chosen/rejected responses")


@dataclass
class DatasetBundle:
    images: list[ImageRecord]
    queries: list[str]
    pairs: list[PreferencePair]
    vocab: list[int]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        image_ids = [im.image_id for im in self.images]
        if len(set(image_ids)) != len(image_ids):
            raise IntegrityError("duplicate image ids")
        known_images = set(image_ids)
        known_queries = set(self.queries)
        known_vocab = set(self.vocab)
        seen: set[str] = set()
        for p in self.pairs:
            if p.pair_id in seen:
                raise IntegrityError(f"duplicate pair id {p.pair_id!r}")
            seen.add(p.pair_id)
            for img in (p.chosen_image, p.rejected_image):
                if img not in known_images:
                    raise IntegrityError(f"pair {p.pair_id}: dangling image id {img!r}")
            if p.query_id not in known_queries:
                raise IntegrityError(f"pair {p.pair_id}: dangling query id {p.query_id!r}")
            for y in (p.chosen_response, p.rejected_response):
                if y not in known_vocab:
                    raise IntegrityError(f"pair {p.pair_id}: dangling response id {y!r}")

    @property
    def image_map(self) -> dict[str, ImageRecord]:
        return {im.image_id: im for im in self.images}

    def pair_map(self) -> dict[str, PreferencePair]:
        return {p.pair_id: p for p in self.pairs}

    def contexts(self) -> list[Context]:
        """Every context the pairs touch, in first-use order."""
        out: dict[Context, None] = {}
        for p in self.pairs:
            for c in p.contexts():
                out.setdefault(c, None)
        return list(out)

    def uniform_policy(self) -> PolicyTable:
        return PolicyTable.uniform(self.contexts(), self.vocab)

    def __eq__(self, other):
        if not isinstance(other, DatasetBundle):
            return NotImplemented
        return (
            self.images == other.images
            and self.queries == other.queries
            and self.pairs == other.pairs
            and self.vocab == other.vocab
            and self.provenance == other.provenance
        )


# -- generation ------------------------------------------------------------


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _rotate(e: np.ndarray, theta: float, rng: np.random.Generator) -> np.ndarray:
    """Rotate unit ``e`` by ``theta`` toward a random orthogonal direction."""
    u = rng.standard_normal(e.shape)
    u = _unit(u - np.dot(u, e) * e)
    return _unit(math.cos(theta) * e + math.sin(theta) * u)


def _grid_positions(m: int, rng: np.random.Generator) -> np.ndarray:
    side = math.ceil(math.sqrt(m))
    cell = 1.0 / side
    pos = []
    for k in range(m):
        r, c = divmod(k, side)
        pos.append(((c + 0.5) * cell, (r + 0.5) * cell))
    jitter = rng.uniform(-0.25 * cell, 0.25 * cell, size=(m, 2))
    return np.clip(np.array(pos) + jitter, 0.0, 1.0)


def generate(config: GenConfig) -> DatasetBundle:
    """Pairs of a sampled image and a ``delta``-perturbed copy.

    The rejected image's embedding is the chosen one rotated by
    ``delta * pi/2``, so the embedding cosine is ``cos(delta * pi/2)``; a
    ``ceil(delta * m)`` subset of its patches gets feature noise of scale
    ``delta``. Positions are shared, so ``delta = 0`` reproduces the image.
    """
    rng = seed_stream(config.seed, STREAM_DATA)
    m, dp = config.patch_count, config.patch_dim
    images, queries, pairs = [], [], []
    width = len(str(config.n_pairs - 1))
    for k in range(config.n_pairs):
        tag = f"{k:0{width}d}"
        delta = float(rng.uniform(config.delta_min, config.delta_max))
        emb_w = _unit(rng.standard_normal(config.embedding_dim))
        feats_w = rng.standard_normal((m, dp))
        pos = _grid_positions(m, rng)

        emb_l = _rotate(emb_w, delta * THETA_MAX, rng) if delta > 0 else emb_w.copy()
        feats_l = feats_w.copy()
        n_perturb = min(m, math.ceil(delta * m))
        if n_perturb:
            idx = rng.choice(m, size=n_perturb, replace=False)
            feats_l[idx] += delta * rng.standard_normal((n_perturb, dp))
        y_w, y_l = (int(v) for v in rng.choice(config.response_vocab_size, size=2, replace=False))

        images.append(ImageRecord(f"img{tag}w", emb_w, feats_w, pos))
        images.append(ImageRecord(f"img{tag}l", emb_l, feats_l, pos.copy()))
        queries.append(f"q{tag}")
        pairs.append(PreferencePair(f"p{tag}", f"q{tag}", f"img{tag}w", f"img{tag}l", y_w, y_l))

    return DatasetBundle(
        images, queries, pairs, list(range(config.response_vocab_size)),
        provenance={"generator": "synthetic-contrastive", "config": asdict(config)},
    )


def base_policy(bundle: DatasetBundle, scale: float, seed: int) -> PolicyTable:
    """Seeded Gaussian-logit policy over the bundle's contexts (``scale=0``: uniform)."""
    contexts = bundle.contexts()
    if scale == 0:
        return PolicyTable.uniform(contexts, bundle.vocab)
    rng = seed_stream(seed, STREAM_BASE_POLICY)
    return PolicyTable(contexts, bundle.vocab, scale * rng.standard_normal((len(contexts), len(bundle.vocab))))


# -- persistence -----------------------------------------------------------


def _hex_list(a: np.ndarray):
    if a.ndim == 1:
        return [x.hex() for x in a.tolist()]
    return [_hex_list(row) for row in a]


def _from_hex(obj) -> np.ndarray:
    def conv(x):
        if isinstance(x, list):
            return [conv(v) for v in x]
        return float.fromhex(x)

    return np.array(conv(obj), dtype=np.float64)


def dumps_bundle(bundle: DatasetBundle) -> str:
    lines = [{
        "format": DATASET_FORMAT,
        "version": DATASET_VERSION,
        "float_mode": "hex",
        "n_images": len(bundle.images),
        "n_queries": len(bundle.queries),
        "n_pairs": len(bundle.pairs),
        "vocab": bundle.vocab,
        "provenance": bundle.provenance,
    }]
    for im in bundle.images:
        lines.append({
            "kind": "image",
            "image_id": im.image_id,
            "embedding": _hex_list(im.embedding),
            "patch_features": _hex_list(im.patch_features),
            "patch_positions": _hex_list(im.patch_positions),
        })
    for q in bundle.queries:
        lines.append({"kind": "query", "query_id": q})
    for p in bundle.pairs:
        lines.append({"kind": "pair", **asdict(p)})
    return "".join(json.dumps(rec, separators=(",", ":"), sort_keys=False) + "\n" for rec in lines)


def write_bundle(bundle: DatasetBundle, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_bundle(bundle))


_SECTION_ORDER = {"image": 0, "query": 1, "pair": 2}


def loads_bundle(text: str) -> DatasetBundle:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise DatasetFormatError("empty dataset file", 1)

    def parse(i: int) -> dict:
        try:
            rec = json.loads(lines[i])
        except json.JSONDecodeError as exc:
            raise DatasetFormatError(f"malformed record ({exc.msg})", i + 1) from None
        if not isinstance(rec, dict):
            raise DatasetFormatError("record is not an object", i + 1)
        return rec

    header = parse(0)
    if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
        raise DatasetFormatError("not a version-1 dataset header", 1)
    if header.get("float_mode") != "hex":
        raise DatasetFormatError(f"unsupported float mode {header.get('float_mode')!r}", 1)
    if not isinstance(header.get("vocab"), list):
        raise DatasetFormatError("header lacks a vocab list", 1)

    images, queries, pairs = [], [], []
    section = 0
    for i in range(1, len(lines)):
        rec = parse(i)
        kind = rec.get("kind")
        if kind not in _SECTION_ORDER:
            raise DatasetFormatError(f"unknown record kind {kind!r}", i + 1)
        if _SECTION_ORDER[kind] < section:
            raise DatasetFormatError(f"{kind} record after a later section", i + 1)
        section = _SECTION_ORDER[kind]
        try:
            if kind == "image":
                image = ImageRecord(
                    rec["image_id"],
                    _from_hex(rec["embedding"]),
                    _from_hex(rec["patch_features"]),
                    _from_hex(rec["patch_positions"]),
                )
                image.validate()
                images.append(image)
            elif kind == "query":
                queries.append(rec["query_id"])
            else:
                pairs.append(PreferencePair(
                    rec["pair_id"], rec["query_id"], rec["chosen_image"], rec["rejected_image"],
                    rec["chosen_response"], rec["rejected_response"],
                ))
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetFormatError(f"bad {kind} record: {exc!r}", i + 1) from None

    counts = {"n_images": len(images), "n_queries": len(queries), "n_pairs": len(pairs)}
    for key, got in counts.items():
        if header.get(key) != got:
            raise DatasetFormatError(
                f"header declares {key}={header.get(key)} but file holds {got} (truncated?)",
                len(lines) + 1,
            )
    return DatasetBundle(images, queries, pairs, header["vocab"], header.get("provenance", {}))


def read_bundle(path) -> DatasetBundle:
    with open(path, encoding="utf-8") as fh:
        return loads_bundle(fh.read())
