"""Exact cosine retrieval over a persisted embedding index.

The index stores the frozen global embedding of every corpus image in a
little-endian binary file (format below). Search inverts the reference image
into pseudo tokens, renders the composed query sentence, encodes it, and
ranks all index rows by cosine similarity, breaking score ties by ascending
image id. Rebuilding an index from the same inputs and seed yields a
byte-identical file.

Index file layout (version 1, all integers little-endian):

    magic            8 bytes  b"FTICIRIX"
    version          u16
    reserved         u16      always 0
    n_rows           u64
    d_embed          u32
    created_at       u64      unix seconds; 0 when built deterministically
    backbone_name    u16 length + UTF-8 bytes
    ids              n_rows * (u16 length + UTF-8 bytes)
    matrix           n_rows * d_embed float32, row-major
"""

from __future__ import annotations

import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import ranking, textgen
from .backbone import Backbone
from .captions import CaptionSource
from .errors import DataError, FormatError, InputError
from .inversion import FilterConfig, InversionNetwork

logger = logging.getLogger(__name__)

MAGIC = b"FTICIRIX"
INDEX_FORMAT_VERSION = 1
IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp")


class ImageStore:
    """Directory of images addressed by file stem."""

    def __init__(self, image_dir: str | Path):
        self.image_dir = Path(image_dir)
        if not self.image_dir.is_dir():
            raise DataError(f"image directory {self.image_dir} does not exist")
        self._paths = {
            p.stem: p for p in sorted(self.image_dir.iterdir())
            if p.suffix.lower() in IMAGE_EXTENSIONS
        }

    def ids(self) -> list[str]:
        return sorted(self._paths)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._paths

    def path(self, image_id: str) -> Path:
        if image_id not in self._paths:
            raise DataError(f"unknown image id {image_id!r}")
        return self._paths[image_id]


def _write_string(out: list[bytes], text: str):
    raw = text.encode("utf-8")
    if len(raw) > 0xFFFF:
        raise FormatError(f"string too long for index format: {text[:40]}...")
    out.append(struct.pack("<H", len(raw)))
    out.append(raw)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("index file truncated")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def string(self) -> str:
        (length,) = self.unpack("<H")
        return self.take(length).decode("utf-8")


@dataclass
class RetrievalIndex:
    """Id list plus row-aligned embedding matrix."""

    ids: list[str]
    embeddings: np.ndarray  # (N, d_embed) float32
    backbone_name: str
    created_at: int = 0
    _row_of: dict[str, int] = field(init=False, repr=False)
    _tie_rank: np.ndarray = field(init=False, repr=False)
    _unit_rows: np.ndarray | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.embeddings.ndim != 2:
            raise FormatError("index embeddings must be a 2-D matrix")
        if len(self.ids) != self.embeddings.shape[0]:
            raise FormatError("index id count does not match matrix rows")
        if len(set(self.ids)) != len(self.ids):
            raise FormatError("index ids must be unique")
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float32)
        self._row_of = {image_id: i for i, image_id in enumerate(self.ids)}
        order = sorted(range(len(self.ids)), key=lambda i: self.ids[i])
        rank = np.empty(len(self.ids), dtype=np.int64)
        for lex_pos, row in enumerate(order):
            rank[row] = lex_pos
        self._tie_rank = rank

    def __len__(self) -> int:
        return len(self.ids)

    def row(self, image_id: str) -> int:
        if image_id not in self._row_of:
            raise DataError(f"image id {image_id!r} not in index")
        return self._row_of[image_id]

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._row_of

    @property
    def tie_rank(self) -> np.ndarray:
        return self._tie_rank

    @property
    def unit_rows(self) -> np.ndarray:
        """Rows scaled to unit norm; zero rows stay zero."""
        if self._unit_rows is None:
            norms = np.linalg.norm(self.embeddings, axis=1, keepdims=True)
            safe = np.where(norms > 0, norms, 1.0)
            self._unit_rows = (self.embeddings / safe).astype(np.float32)
        return self._unit_rows

    # ----- persistence --------------------------------------------------

    def to_bytes(self) -> bytes:
        parts: list[bytes] = [
            MAGIC,
            struct.pack("<HH", INDEX_FORMAT_VERSION, 0),
            struct.pack("<QIQ", len(self.ids), self.embeddings.shape[1],
                        self.created_at),
        ]
        _write_string(parts, self.backbone_name)
        for image_id in self.ids:
            _write_string(parts, image_id)
        matrix = np.ascontiguousarray(self.embeddings, dtype="<f4")
        parts.append(matrix.tobytes(order="C"))
        return b"".join(parts)

    def save(self, path: str | Path):
        """Persist atomically: write a temp file, then rename into place."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".index.tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(self.to_bytes())
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    @classmethod
    def from_bytes(cls, blob: bytes) -> "RetrievalIndex":
        reader = _Reader(blob)
        if reader.take(len(MAGIC)) != MAGIC:
            raise FormatError("not an index file (bad magic)")
        version, _reserved = reader.unpack("<HH")
        if version != INDEX_FORMAT_VERSION:
            raise FormatError(f"unsupported index format version {version}")
        n_rows, d_embed, created_at = reader.unpack("<QIQ")
        backbone_name = reader.string()
        ids = [reader.string() for _ in range(n_rows)]
        raw = reader.take(n_rows * d_embed * 4)
        matrix = np.frombuffer(raw, dtype="<f4").reshape(n_rows, d_embed).copy()
        if reader.pos != len(blob):
            raise FormatError("index file has trailing bytes")
        return cls(ids=ids, embeddings=matrix, backbone_name=backbone_name,
                   created_at=created_at)

    @classmethod
    def load(cls, path: str | Path) -> "RetrievalIndex":
        try:
            blob = Path(path).read_bytes()
        except OSError as exc:
            raise FormatError(f"cannot read index {path}: {exc}") from exc
        return cls.from_bytes(blob)


def build_index(
    image_dir: str | Path, backbone: Backbone, created_at: int = 0
) -> RetrievalIndex:
    """Encode every readable image in a directory into an index.

    Unreadable files are skipped with a warning; an empty result is an error.
    Ids are file stems, rows sorted by id, so identical inputs and backbone
    seed give a byte-identical index file.
    """
    store = ImageStore(image_dir)
    ids: list[str] = []
    rows: list[np.ndarray] = []
    for image_id in store.ids():
        try:
            feats = backbone.encode_image(store.path(image_id))
        except InputError as exc:
            logger.warning("skipping unreadable image %s: %s", image_id, exc)
            continue
        ids.append(image_id)
        rows.append(feats.global_embed.detach().cpu().numpy().astype(np.float32))
    if not ids:
        raise DataError(f"no readable images in {image_dir}")
    return RetrievalIndex(
        ids=ids, embeddings=np.stack(rows),
        backbone_name=backbone.config.name, created_at=created_at,
    )


@dataclass(frozen=True)
class SearchResult:
    image_id: str
    score: float


def score_query_embedding(index: RetrievalIndex, query: np.ndarray) -> np.ndarray:
    """Cosine of a query vector against every index row (float32)."""
    if query.ndim != 1 or query.shape[0] != index.embeddings.shape[1]:
        raise InputError(
            f"query embedding must have dim {index.embeddings.shape[1]}"
        )
    qnorm = float(np.linalg.norm(query))
    if qnorm == 0.0:
        return np.zeros(len(index), dtype=np.float32)
    unit_query = (query / qnorm).astype(np.float32)
    return index.unit_rows @ unit_query


def compose_query_embedding(
    network: InversionNetwork,
    backbone: Backbone,
    reference_image,
    modification: str,
    filter_cfg: FilterConfig,
    ablations: frozenset[str] = frozenset(),
) -> np.ndarray:
    """Invert the reference and encode the composed query sentence."""
    network.eval()
    feats = backbone.encode_image(reference_image)
    with torch.no_grad():
        pseudo = network.invert(feats, filter_cfg)
        seq = textgen.query_template(
            pseudo, modification, backbone.tokenizer,
            backbone.config.max_text_len, ablations,
        )
        embed = backbone.encode_text(seq)
    return embed.detach().cpu().numpy().astype(np.float32)


def search(
    index: RetrievalIndex,
    network: InversionNetwork,
    backbone: Backbone,
    reference_image,
    modification: str,
    filter_cfg: FilterConfig,
    top_k: int = 20,
    ablations: frozenset[str] = frozenset(),
) -> list[SearchResult]:
    """Composed image retrieval: reference image + modification text.

    Returns the top_k index entries by descending cosine score; ties resolve
    by ascending image id. top_k beyond the index size is clamped.
    """
    if top_k < 1:
        raise InputError(f"top_k must be >= 1, got {top_k}")
    query = compose_query_embedding(
        network, backbone, reference_image, modification, filter_cfg, ablations
    )
    scores = score_query_embedding(index, query)
    top = ranking.topk_ranked(scores, index.tie_rank, min(top_k, len(index)))
    return [SearchResult(index.ids[i], float(scores[i])) for i in top]


# ----- pseudo-token description ---------------------------------------------


@dataclass(frozen=True)
class DescriptionEntry:
    kind: str   # "subject" or "attribute"
    text: str


class DescriptionCorpus:
    """Caption-derived subject/attribute phrases with text embeddings.

    Each caption in the source is split once; the unique subject phrases are
    embedded through ``a photo of {subj}.`` and the unique attribute phrases
    through ``a photo with {attr}.`` so they can be matched against the same
    single-kind pseudo templates of a query image.
    """

    def __init__(self, entries: list[DescriptionEntry], embeddings: np.ndarray):
        if len(entries) != embeddings.shape[0]:
            raise DataError("corpus entries and embeddings disagree")
        self.entries = entries
        self.embeddings = embeddings.astype(np.float32)

    @classmethod
    def build(cls, captions: CaptionSource, backbone: Backbone,
              tagger=None) -> "DescriptionCorpus":
        tagger = tagger or textgen.LexiconTagger()
        subjects: set[str] = set()
        attributes: set[str] = set()
        for image_id in captions.ids():
            split = textgen.split_caption(captions.get(image_id), tagger)
            subjects.add(split.subject)
            if split.attribute:
                attributes.add(split.attribute)
        entries: list[DescriptionEntry] = []
        texts: list[str] = []
        for subj in sorted(subjects):
            entries.append(DescriptionEntry("subject", subj))
            texts.append(f"a photo of {subj}.")
        for attr in sorted(attributes):
            entries.append(DescriptionEntry("attribute", attr))
            texts.append(f"a photo with {attr}.")
        if not entries:
            raise DataError("caption source produced no description phrases")
        rows = []
        with torch.no_grad():
            for text in texts:
                seq = textgen.bind_template(
                    text, [], backbone.tokenizer,
                    backbone.config.max_text_len, label="description",
                )
                rows.append(backbone.encode_text(seq).cpu().numpy())
        return cls(entries, np.stack(rows))


def describe(
    reference_image,
    network: InversionNetwork,
    backbone: Backbone,
    corpus: DescriptionCorpus,
    filter_cfg: FilterConfig,
    top_n: int = 4,
) -> dict[str, list[tuple[str, float]]]:
    """Nearest caption phrases to an image's subject and attribute tokens.

    The subject pseudo token is rendered as ``a photo of <pw>.`` and matched
    against subject phrases; the attribute tokens as ``a photo with <pw>...``
    against attribute phrases. Returns up to top_n (text, score) pairs per
    kind, best first.
    """
    if top_n < 1:
        raise InputError("top_n must be >= 1")
    network.eval()
    feats = backbone.encode_image(reference_image)
    tokenizer = backbone.tokenizer
    max_len = backbone.config.max_text_len
    with torch.no_grad():
        pseudo = network.invert(feats, filter_cfg)
        subj_seq = textgen.bind_template(
            f"a photo of {textgen.SLOT}.", [pseudo.subject], tokenizer,
            max_len, label="subject description probe",
        )
        slots = " ".join([textgen.SLOT] * pseudo.num_attributes)
        attr_seq = textgen.bind_template(
            f"a photo with {slots}.", list(pseudo.attributes), tokenizer,
            max_len, label="attribute description probe",
        )
        probes = {
            "subject": backbone.encode_text(subj_seq).cpu().numpy(),
            "attribute": backbone.encode_text(attr_seq).cpu().numpy(),
        }
    out: dict[str, list[tuple[str, float]]] = {}
    for kind, probe in probes.items():
        rows = [i for i, e in enumerate(corpus.entries) if e.kind == kind]
        if not rows:
            out[kind] = []
            continue
        sub = corpus.embeddings[rows]
        norms = np.linalg.norm(sub, axis=1)
        pnorm = np.linalg.norm(probe)
        denom = norms * pnorm
        scores = np.where(denom > 0, (sub @ probe) / np.where(denom > 0, denom, 1.0), 0.0)
        texts = [corpus.entries[i].text for i in rows]
        lex = sorted(range(len(rows)), key=texts.__getitem__)
        tie = np.empty(len(rows), dtype=np.int64)
        for pos, idx in enumerate(lex):
            tie[idx] = pos
        order = ranking.topk_ranked(scores, tie, min(top_n, len(rows)))
        out[kind] = [(texts[i], float(scores[i])) for i in order]
    return out
