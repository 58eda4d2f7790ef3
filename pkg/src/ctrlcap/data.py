"""Grounded captions, region sets, control signals and the synthetic corpus.

The corpus generator replaces real detection datasets at desk scale: each
image gets a handful of regions drawn around per-class feature centroids, and
captions are template-generated so the chunk-to-region-set mapping is exact
by construction. Chunk spans use inclusive (start, end) token indices.

Corpora are stored as JSONL (one image per line) next to a meta.json holding
the vocabulary, grammar classes and the synthetic noun-embedding table.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, CorpusError
from .metrics import NounEmbeddingTable

CORPUS_VERSION = 1
BOS = "<bos>"
EOS = "<eos>"


class Vocab:
    """Token string <-> id mapping with BOS/EOS specials and noun flags."""

    def __init__(self, tokens: list[str], noun_class: dict[str, str]):
        if tokens[:2] != [BOS, EOS]:
            raise CorpusError("vocabulary must start with the BOS/EOS specials")
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(tokens)}
        if len(self.index) != len(tokens):
            raise CorpusError("duplicate tokens in vocabulary")
        self.noun_class = dict(noun_class)  # noun token -> class name
        self.bos_id = 0
        self.eos_id = 1

    def __len__(self):
        return len(self.tokens)

    def id(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise CorpusError(f"token {token!r} not in vocabulary") from None

    def token(self, idx: int) -> str:
        return self.tokens[idx]

    def is_noun_id(self, idx: int) -> bool:
        return self.tokens[idx] in self.noun_class


@dataclass
class Region:
    feat: np.ndarray        # detector-feature stand-in, dim feat_dim
    class_id: int           # index into Corpus.class_names
    class_emb: np.ndarray   # class centroid embedding, dim emb_dim
    geom: np.ndarray        # normalized (x, y, w, h), each in [0, 1]


@dataclass
class RegionSet:
    indices: list[int]      # region indices within the owning image
    regions: list[Region]

    def __len__(self):
        return len(self.regions)

    def feats(self) -> np.ndarray:
        return np.stack([r.feat for r in self.regions])

    def mean_x(self) -> float:
        return float(np.mean([r.geom[0] + r.geom[2] / 2 for r in self.regions]))


@dataclass
class ControlSignal:
    sets: list[RegionSet]

    def __len__(self):
        return len(self.sets)


@dataclass
class Chunk:
    start: int              # inclusive
    end: int                # inclusive
    set: list[int]          # region indices grounding this chunk


@dataclass
class GroundedCaption:
    tokens: list[int]       # word ids, ends with EOS
    chunks: list[Chunk]
    gates: list[int]        # 1 exactly on the last token of each chunk
    region_seq: list[int]   # per-token region-set index
    is_noun: list[bool]     # True on each chunk's head (last) token


@dataclass
class ImageEntry:
    image_id: int
    regions: list[Region]
    captions: list[GroundedCaption]

    def image_desc(self) -> np.ndarray:
        return np.mean([r.feat for r in self.regions], axis=0)


@dataclass
class Sample:
    image: ImageEntry
    caption: GroundedCaption

    @property
    def image_desc(self) -> np.ndarray:
        return self.image.image_desc()

    @property
    def control(self) -> ControlSignal:
        sets = [
            RegionSet(ch.set, [self.image.regions[i] for i in ch.set])
            for ch in self.caption.chunks
        ]
        return ControlSignal(sets)


def build_gate_sequence(n_tokens: int, chunks: list[Chunk]):
    """Derive (gates, region_seq) from chunk spans over a token sequence.

    The gate fires on the last token of every chunk; the region index follows
    the running gate count clamped to the last set, so tokens between and
    after chunks keep attending the current set through the sentinels.
    """
    if not chunks:
        raise CorpusError("caption has no chunks")
    prev_end = -1
    for k, ch in enumerate(chunks):
        if ch.start > ch.end:
            raise CorpusError(f"chunk {k} has start {ch.start} > end {ch.end}")
        if ch.start <= prev_end:
            raise CorpusError(f"chunk {k} overlaps or is out of order")
        if ch.end >= n_tokens:
            raise CorpusError(f"chunk {k} exceeds token range ({ch.end} >= {n_tokens})")
        if not ch.set:
            raise CorpusError(f"chunk {k} has an empty region set")
        prev_end = ch.end

    n_sets = len(chunks)
    gates = [0] * n_tokens
    for ch in chunks:
        gates[ch.end] = 1
    region_seq = []
    fired = 0
    for t in range(n_tokens):
        region_seq.append(min(fired, n_sets - 1))
        fired += gates[t]
    return gates, region_seq


# ------------------------------------------------------------------ grammar

DEFAULT_CLASSES = {
    "dog": ["dog", "puppy"],
    "cat": ["cat", "kitten"],
    "person": ["man", "woman"],
    "car": ["car", "truck"],
    "tree": ["tree", "bush"],
    "ball": ["ball", "frisbee"],
    "house": ["house", "cabin"],
    "bird": ["bird", "crow"],
}


@dataclass
class GrammarConfig:
    """Template grammar for the synthetic corpus."""

    classes: dict[str, list[str]] = field(default_factory=lambda: {k: list(v) for k, v in DEFAULT_CLASSES.items()})
    determiners: tuple = ("a", "the")
    adjectives: tuple = ("big", "small")
    connectives: tuple = ("with", "near", "and", "beside")
    adjective_prob: float = 0.35
    regions_per_image: tuple = (3, 8)
    chunks_per_caption: tuple = (2, 4)
    captions_per_image: tuple = (2, 3)
    max_set_size: int = 4
    feat_dim: int = 64
    emb_dim: int = 16
    feat_noise: float = 0.05
    order: str = "random"   # "random" | "spatial" (mention order = left to right)

    def validate(self):
        if not self.classes or any(not nouns for nouns in self.classes.values()):
            raise ConfigError("grammar needs at least one class with at least one noun")
        if len(self.classes) > self.emb_dim:
            raise ConfigError(
                f"{len(self.classes)} classes exceed emb_dim={self.emb_dim} orthonormal centroids"
            )
        if self.order not in ("random", "spatial"):
            raise ConfigError(f"unknown chunk order mode {self.order!r}")
        if not self.determiners or not self.connectives:
            raise ConfigError("grammar needs determiners and connectives")
        lo, hi = self.chunks_per_caption
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad chunks_per_caption range {self.chunks_per_caption}")
        lo, hi = self.regions_per_image
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad regions_per_image range {self.regions_per_image}")
        if self.max_set_size < 1:
            raise ConfigError("max_set_size must be positive")


@dataclass
class Corpus:
    vocab: Vocab
    class_names: list[str]
    classes: dict[str, list[str]]          # class name -> noun tokens
    feat_dim: int
    emb_dim: int
    seed: int
    noun_table: NounEmbeddingTable
    class_centroids: dict[str, np.ndarray]  # emb-space centroid per class
    feat_centroids: dict[str, np.ndarray]   # feature-space centroid per class
    images: list[ImageEntry]

    def samples(self) -> list[Sample]:
        return [Sample(img, cap) for img in self.images for cap in img.captions]

    def nouns_of(self, caption: GroundedCaption) -> list[str]:
        return [
            self.vocab.token(tok)
            for tok, isn in zip(caption.tokens, caption.is_noun)
            if isn
        ]

    def decoded_nouns(self, token_ids) -> list[str]:
        """Noun tokens of a decoded id sequence, in order."""
        return [
            self.vocab.token(t)
            for t in token_ids
            if t not in (self.vocab.bos_id, self.vocab.eos_id)
            and self.vocab.is_noun_id(t)
        ]

    def set_signature(self, caption: GroundedCaption) -> tuple:
        return tuple(tuple(ch.set) for ch in caption.chunks)

    def references_for(self, sample: Sample) -> list[GroundedCaption]:
        """Captions of the same image sharing the same control sequence."""
        sig = self.set_signature(sample.caption)
        return [
            cap
            for cap in sample.image.captions
            if self.set_signature(cap) == sig
        ]

    def subset(self, image_ids) -> "Corpus":
        keep = set(image_ids)
        return Corpus(
            vocab=self.vocab,
            class_names=self.class_names,
            classes=self.classes,
            feat_dim=self.feat_dim,
            emb_dim=self.emb_dim,
            seed=self.seed,
            noun_table=self.noun_table,
            class_centroids=self.class_centroids,
            feat_centroids=self.feat_centroids,
            images=[img for img in self.images if img.image_id in keep],
        )


# ---------------------------------------------------------------- generator


def generate_corpus(seed: int, n_images: int, grammar: GrammarConfig | None = None) -> Corpus:
    """Deterministically generate a synthetic grounded-captioning corpus.

    Every image carries 3-8 regions with class-centroid + noise features; each
    caption is template-generated over a subset of the image's classes, so the
    chunk-to-region-set mapping is exact. The first two captions of an image
    share their chunks but differ in mention order whenever possible, which is
    what the controllability tests rely on.
    """
    grammar = grammar or GrammarConfig()
    grammar.validate()
    if n_images <= 0:
        raise ConfigError(f"n_images must be positive, got {n_images}")

    rng = np.random.default_rng(seed)
    class_names = list(grammar.classes)
    noun_table, class_centroids = NounEmbeddingTable.build(
        grammar.classes, grammar.emb_dim, seed
    )
    feat_centroids = {}
    for name in class_names:
        v = rng.standard_normal(grammar.feat_dim)
        feat_centroids[name] = v / np.linalg.norm(v)

    nouns = [n for name in class_names for n in grammar.classes[name]]
    tokens = [BOS, EOS]
    tokens += list(dict.fromkeys(
        list(grammar.determiners) + list(grammar.adjectives) + list(grammar.connectives) + nouns
    ))
    noun_class = {n: name for name in class_names for n in grammar.classes[name]}
    vocab = Vocab(tokens, noun_class)

    images = []
    for image_id in range(n_images):
        n_regions = int(rng.integers(grammar.regions_per_image[0], grammar.regions_per_image[1] + 1))
        want_distinct = min(len(class_names), grammar.chunks_per_caption[1], n_regions)
        region_classes = [int(rng.integers(len(class_names))) for _ in range(n_regions)]
        # guarantee enough distinct classes for multi-chunk captions
        missing = want_distinct - len(set(region_classes))
        if missing > 0:
            unused = [c for c in range(len(class_names)) if c not in set(region_classes)]
            slots = list(rng.permutation(n_regions))[:missing]
            for slot, cls in zip(slots, unused):
                region_classes[slot] = cls

        regions = []
        for cls in region_classes:
            name = class_names[cls]
            feat = feat_centroids[name] + grammar.feat_noise * rng.standard_normal(grammar.feat_dim)
            geom = np.array([
                rng.uniform(0.0, 0.8),
                rng.uniform(0.0, 0.8),
                rng.uniform(0.05, 0.2),
                rng.uniform(0.05, 0.2),
            ])
            regions.append(Region(feat=feat, class_id=cls, class_emb=class_centroids[name].copy(), geom=geom))

        by_class = {}
        for idx, r in enumerate(regions):
            by_class.setdefault(r.class_id, []).append(idx)
        available = sorted(by_class)

        def class_order(chosen):
            if grammar.order == "spatial":
                def key(cls):
                    idxs = by_class[cls][: grammar.max_set_size]
                    return float(np.mean([regions[i].geom[0] + regions[i].geom[2] / 2 for i in idxs]))
                return sorted(chosen, key=key)
            return [chosen[i] for i in rng.permutation(len(chosen))]

        n_caps = int(rng.integers(grammar.captions_per_image[0], grammar.captions_per_image[1] + 1))
        cap_specs = []
        lo = min(grammar.chunks_per_caption[0], len(available))
        hi = min(grammar.chunks_per_caption[1], len(available))
        first_m = int(rng.integers(lo, hi + 1))
        first_classes = list(rng.choice(available, size=first_m, replace=False))
        first_order = class_order(first_classes)
        cap_specs.append(first_order)
        if n_caps >= 2 and grammar.order == "random" and first_m >= 2:
            # second caption: same chunks, different mention order
            alt = first_order
            while alt == first_order:
                alt = [first_classes[i] for i in rng.permutation(first_m)]
            cap_specs.append(alt)
        for _ in range(n_caps - len(cap_specs)):
            m = int(rng.integers(lo, hi + 1))
            chosen = list(rng.choice(available, size=m, replace=False))
            cap_specs.append(class_order(chosen))

        captions = []
        for order in cap_specs:
            cap_tokens = []
            chunks = []
            for k, cls in enumerate(order):
                if k > 0:
                    cap_tokens.append(vocab.id(str(rng.choice(grammar.connectives))))
                start = len(cap_tokens)
                cap_tokens.append(vocab.id(str(rng.choice(grammar.determiners))))
                if grammar.adjectives and rng.random() < grammar.adjective_prob:
                    cap_tokens.append(vocab.id(str(rng.choice(grammar.adjectives))))
                noun = str(rng.choice(grammar.classes[class_names[cls]]))
                cap_tokens.append(vocab.id(noun))
                chunks.append(Chunk(start=start, end=len(cap_tokens) - 1, set=by_class[cls][: grammar.max_set_size]))
            cap_tokens.append(vocab.eos_id)
            gates, region_seq = build_gate_sequence(len(cap_tokens), chunks)
            is_noun = [False] * len(cap_tokens)
            for ch in chunks:
                is_noun[ch.end] = True
            captions.append(GroundedCaption(cap_tokens, chunks, gates, region_seq, is_noun))

        images.append(ImageEntry(image_id=image_id, regions=regions, captions=captions))

    return Corpus(
        vocab=vocab,
        class_names=class_names,
        classes={k: list(v) for k, v in grammar.classes.items()},
        feat_dim=grammar.feat_dim,
        emb_dim=grammar.emb_dim,
        seed=seed,
        noun_table=noun_table,
        class_centroids=class_centroids,
        feat_centroids=feat_centroids,
        images=images,
    )


# -------------------------------------------------------------- persistence


def _meta_path(jsonl_path: Path) -> Path:
    return jsonl_path.parent / "meta.json"


def save_corpus(corpus: Corpus, path, meta_path=None):
    """Write the image JSONL plus the sibling meta.json."""
    path = Path(path)
    meta_path = Path(meta_path) if meta_path else _meta_path(path)
    meta = {
        "version": CORPUS_VERSION,
        "seed": corpus.seed,
        "feat_dim": corpus.feat_dim,
        "emb_dim": corpus.emb_dim,
        "class_names": corpus.class_names,
        "classes": corpus.classes,
        "vocab": corpus.vocab.tokens,
        "class_centroids": {k: v.tolist() for k, v in corpus.class_centroids.items()},
        "feat_centroids": {k: v.tolist() for k, v in corpus.feat_centroids.items()},
        "noun_vectors": {k: v.tolist() for k, v in corpus.noun_table.vectors.items()},
    }
    meta_path.parent.mkdir(parents=True, exist_ok=True)
    meta_path.write_text(json.dumps(meta, indent=1) + "\n", encoding="utf-8")

    with path.open("w", encoding="utf-8") as fh:
        for img in corpus.images:
            line = {
                "image_id": img.image_id,
                "regions": [
                    {
                        "feat": r.feat.tolist(),
                        "class_id": r.class_id,
                        "geom": r.geom.tolist(),
                    }
                    for r in img.regions
                ],
                "captions": [
                    {
                        "tokens": [corpus.vocab.token(t) for t in cap.tokens[:-1]],
                        "chunks": [
                            {"start": ch.start, "end": ch.end, "set": ch.set}
                            for ch in cap.chunks
                        ],
                        "gates": cap.gates,
                    }
                    for cap in img.captions
                ],
            }
            fh.write(json.dumps(line) + "\n")


def load_corpus(path, meta_path=None) -> Corpus:
    """Load and validate a corpus; raises CorpusError naming the bad field."""
    path = Path(path)
    meta_path = Path(meta_path) if meta_path else _meta_path(path)
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CorpusError(f"corpus meta file not found: {meta_path}") from None
    except json.JSONDecodeError as e:
        raise CorpusError(f"corpus meta is not valid JSON: {e}") from None
    if meta.get("version") != CORPUS_VERSION:
        raise CorpusError(f"unsupported corpus version {meta.get('version')!r}")

    class_names = meta["class_names"]
    classes = meta["classes"]
    feat_dim = meta["feat_dim"]
    emb_dim = meta["emb_dim"]
    noun_class = {n: name for name in class_names for n in classes[name]}
    vocab = Vocab(meta["vocab"], noun_class)
    noun_table = NounEmbeddingTable({k: np.array(v) for k, v in meta["noun_vectors"].items()})
    class_centroids = {k: np.array(v) for k, v in meta["class_centroids"].items()}
    feat_centroids = {k: np.array(v) for k, v in meta["feat_centroids"].items()}

    images = []
    with path.open("r", encoding="utf-8") as fh:
        for ln, raw in enumerate(fh):
            if not raw.strip():
                continue
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as e:
                raise CorpusError(f"line {ln}: invalid JSON: {e}") from None
            images.append(_parse_image(rec, ln, vocab, class_names, class_centroids, feat_dim))

    return Corpus(
        vocab=vocab,
        class_names=class_names,
        classes=classes,
        feat_dim=feat_dim,
        emb_dim=emb_dim,
        seed=meta["seed"],
        noun_table=noun_table,
        class_centroids=class_centroids,
        feat_centroids=feat_centroids,
        images=images,
    )


def _parse_image(rec, ln, vocab, class_names, class_centroids, feat_dim) -> ImageEntry:
    where = f"line {ln} (image_id={rec.get('image_id')})"
    regions = []
    for ri, r in enumerate(rec.get("regions", [])):
        feat = np.asarray(r.get("feat", []), dtype=np.float64)
        if feat.shape != (feat_dim,):
            raise CorpusError(f"{where}: region {ri} feat has shape {feat.shape}, expected ({feat_dim},)")
        cls = r.get("class_id")
        if not isinstance(cls, int) or not 0 <= cls < len(class_names):
            raise CorpusError(f"{where}: region {ri} class_id {cls!r} out of range")
        geom = np.asarray(r.get("geom", []), dtype=np.float64)
        if geom.shape != (4,):
            raise CorpusError(f"{where}: region {ri} geom must have 4 components")
        if np.any(geom < 0.0) or np.any(geom > 1.0):
            raise CorpusError(f"{where}: region {ri} geom components must lie in [0, 1]")
        regions.append(
            Region(feat=feat, class_id=cls, class_emb=class_centroids[class_names[cls]].copy(), geom=geom)
        )
    if not regions:
        raise CorpusError(f"{where}: image has no regions")

    captions = []
    for ci, c in enumerate(rec.get("captions", [])):
        try:
            token_ids = [vocab.id(t) for t in c.get("tokens", [])] + [vocab.eos_id]
        except CorpusError as e:
            raise CorpusError(f"{where}: caption {ci}: {e}") from None
        chunks = [Chunk(ch["start"], ch["end"], list(ch["set"])) for ch in c.get("chunks", [])]
        for k, ch in enumerate(chunks):
            for idx in ch.set:
                if not 0 <= idx < len(regions):
                    raise CorpusError(f"{where}: caption {ci} chunk {k} region index {idx} out of range")
        try:
            gates, region_seq = build_gate_sequence(len(token_ids), chunks)
        except CorpusError as e:
            raise CorpusError(f"{where}: caption {ci}: {e}") from None
        stored = c.get("gates")
        if stored is not None and list(stored) != gates:
            raise CorpusError(
                f"{where}: caption {ci}: stored gates {stored} disagree with chunk spans"
            )
        is_noun = [False] * len(token_ids)
        for ch in chunks:
            is_noun[ch.end] = True
        captions.append(GroundedCaption(token_ids, chunks, gates, region_seq, is_noun))
    if not captions:
        raise CorpusError(f"{where}: image has no captions")

    return ImageEntry(image_id=rec["image_id"], regions=regions, captions=captions)
