"""Frozen dual-encoder backbone interface and the deterministic toy backbone.

The backbone owns three things: an image encoder that returns a global
embedding plus per-patch features, a text encoder that maps a token sequence
(possibly containing pseudo-token slots) to the shared embedding space, and
the tokenizer used to build those sequences. All backbone weights are frozen;
the text encoder stays differentiable with respect to the injected slot
vectors only.

The toy backbone is a small seeded transformer stack meant for tests and
desk-scale runs: construction is deterministic given (config, seed), encoding
is deterministic given the input, and nothing here ever receives gradient
updates. Real backbones plug in via ``backbone.name = plugin:<module>:<attr>``.
"""

from __future__ import annotations

import hashlib
import importlib
import importlib.util
import math
import re
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import config as configmod
from .errors import ConfigError, InputError


@dataclass(frozen=True)
class BackboneConfig:
    """Dimensional contract a backbone exposes to the rest of the system."""

    name: str = "toy"
    d_embed: int = 32
    d_patch: int = 48
    m_patches: int = 16
    d_token: int = 24
    max_text_len: int = 77
    input_size: int = 64
    seed: int = 7

    def __post_init__(self):
        for fname in ("d_embed", "d_patch", "m_patches", "d_token",
                      "max_text_len", "input_size"):
            if getattr(self, fname) <= 0:
                raise ConfigError(f"backbone.{fname} must be positive")

    @classmethod
    def from_flat(cls, cfg: dict[str, str]) -> "BackboneConfig":
        return cls(
            name=configmod.get_str(cfg, "backbone.name"),
            d_embed=configmod.get_int(cfg, "backbone.d_embed"),
            d_patch=configmod.get_int(cfg, "backbone.d_patch"),
            m_patches=configmod.get_int(cfg, "backbone.m_patches"),
            d_token=configmod.get_int(cfg, "backbone.d_token"),
            max_text_len=configmod.get_int(cfg, "backbone.max_text_len"),
            input_size=configmod.get_int(cfg, "backbone.input_size"),
            seed=configmod.get_int(cfg, "backbone.seed"),
        )

    def to_flat(self) -> dict[str, str]:
        return {
            "backbone.name": self.name,
            "backbone.d_embed": str(self.d_embed),
            "backbone.d_patch": str(self.d_patch),
            "backbone.m_patches": str(self.m_patches),
            "backbone.d_token": str(self.d_token),
            "backbone.max_text_len": str(self.max_text_len),
            "backbone.input_size": str(self.input_size),
            "backbone.seed": str(self.seed),
        }


@dataclass
class ImageFeatures:
    """Output of the image encoder: one global vector plus patch features."""

    global_embed: torch.Tensor  # (d_embed,)
    patches: torch.Tensor       # (m_patches, d_patch)

    def __post_init__(self):
        if self.global_embed.dim() != 1:
            raise InputError("global_embed must be a 1-D vector")
        if self.patches.dim() != 2:
            raise InputError("patches must be a 2-D matrix")


@dataclass
class TokenSequence:
    """A tokenized sentence with optional pseudo-token slots.

    ``slots`` lists (position, vector) pairs; each position must hold the
    tokenizer's reserved slot id and the vector replaces that token's
    embedding inside encode_text. Slot vectors are the only differentiable
    inputs of the text encoder.
    """

    ids: list[int]
    slots: list[tuple[int, torch.Tensor]] = field(default_factory=list)

    def __post_init__(self):
        positions = [pos for pos, _ in self.slots]
        if len(set(positions)) != len(positions):
            raise InputError("duplicate pseudo-slot positions")
        for pos, vec in self.slots:
            if not 0 <= pos < len(self.ids):
                raise InputError(f"slot position {pos} out of range")
            if vec.dim() != 1:
                raise InputError("slot vectors must be 1-D")

    def __len__(self) -> int:
        return len(self.ids)


class Backbone(ABC):
    """Frozen encoder pair plus tokenizer."""

    config: BackboneConfig

    @property
    @abstractmethod
    def tokenizer(self):
        ...

    @abstractmethod
    def encode_image(self, image) -> ImageFeatures:
        """Encode an image (path, PIL image, or HxWx3 array). Deterministic."""

    @abstractmethod
    def encode_text(self, seq: TokenSequence) -> torch.Tensor:
        """Encode a token sequence to a (d_embed,) vector.

        Differentiable with respect to the slot vectors in ``seq``; the
        backbone's own weights never receive gradient.
        """


class ToyTokenizer:
    """Stateless hashing tokenizer for the toy backbone.

    Words map to ids through a fixed hash, so the same text encodes
    identically in every process. A reserved id marks pseudo-token slots
    (surface form ``<pw>``); id 0 is padding and never produced. ``decode``
    uses a per-instance registry of seen words, which is enough for
    diagnostics and round-trip tests over a fixed lexicon.
    """

    PAD_ID = 0
    SLOT_ID = 1
    SLOT_TOKEN = "<pw>"
    _RESERVED = 2
    _TOKEN_RE = re.compile(r"<pw>|[a-z0-9']+|[.,!?;:]")
    _HASH_SALT = b"fticir-v1"

    def __init__(self, vocab_size: int = 8192):
        if vocab_size <= self._RESERVED:
            raise ConfigError("vocab_size too small")
        self.vocab_size = vocab_size
        self._seen: dict[int, str] = {}

    def tokenize(self, text: str) -> list[str]:
        return self._TOKEN_RE.findall(text.lower())

    def word_id(self, word: str) -> int:
        if word == self.SLOT_TOKEN:
            return self.SLOT_ID
        digest = hashlib.blake2s(
            word.encode("utf-8"), key=self._HASH_SALT
        ).digest()
        bucket = int.from_bytes(digest[:8], "little")
        wid = bucket % (self.vocab_size - self._RESERVED) + self._RESERVED
        self._seen[wid] = word
        return wid

    def encode(self, text: str) -> list[int]:
        return [self.word_id(tok) for tok in self.tokenize(text)]

    def decode(self, ids: list[int]) -> str:
        words = []
        for wid in ids:
            if wid == self.SLOT_ID:
                words.append(self.SLOT_TOKEN)
            elif wid == self.PAD_ID:
                continue
            else:
                words.append(self._seen.get(wid, f"<{wid}>"))
        text = " ".join(words)
        return re.sub(r" ([.,!?;:])", r"\1", text)


def sinusoidal_positions(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Standard fixed sine/cosine position table of shape (length, dim)."""
    table = torch.zeros(length, dim, dtype=torch.float64)
    position = torch.arange(length, dtype=torch.float64).unsqueeze(1)
    half = (dim + 1) // 2
    freq = torch.exp(
        torch.arange(half, dtype=torch.float64) * (-math.log(10000.0) / max(half - 1, 1))
    )
    angles = position * freq
    table[:, 0::2] = torch.sin(angles[:, : table[:, 0::2].shape[1]])
    table[:, 1::2] = torch.cos(angles[:, : table[:, 1::2].shape[1]])
    return table.to(dtype)


class ToyBackbone(Backbone):
    """Deterministic seeded dual encoder for tests and desk-scale runs.

    Text tower: frozen embedding table + sinusoidal positions + two
    transformer encoder layers + mean pooling + linear projection to the
    shared space. Image tower: a patch-grid transformer producing the patch
    features and an independent seeded projection of the raw pixels producing
    the global embedding, so the two feature kinds are not trivially
    correlated.
    """

    VOCAB_SIZE = 8192
    TEXT_LAYERS = 2
    TEXT_HEADS = 2

    def __init__(self, config: BackboneConfig | None = None,
                 dtype: torch.dtype = torch.float32):
        self.config = config or BackboneConfig()
        self.dtype = dtype
        self._tokenizer = ToyTokenizer(self.VOCAB_SIZE)
        cfg = self.config
        if cfg.d_token % self.TEXT_HEADS:
            raise ConfigError("backbone.d_token must be even for the toy text tower")
        grid = int(round(math.sqrt(cfg.m_patches)))
        self._grid = grid if grid * grid == cfg.m_patches else None
        with torch.random.fork_rng():
            torch.manual_seed(cfg.seed)
            self._build(cfg)
        self._modules = [
            self.token_table, self.text_blocks, self.text_proj,
            self.patch_embed, self.patch_block, self.global_net,
        ]
        for module in self._modules:
            module.to(dtype)
            module.eval()
            for p in module.parameters():
                p.requires_grad_(False)

    def parameters(self):
        """All tower parameters (frozen; exposed for inspection)."""
        for module in self._modules:
            yield from module.parameters()

    def _build(self, cfg: BackboneConfig):
        self.token_table = torch.nn.Embedding(self.VOCAB_SIZE, cfg.d_token)
        self.text_blocks = torch.nn.ModuleList(
            torch.nn.TransformerEncoderLayer(
                d_model=cfg.d_token, nhead=self.TEXT_HEADS,
                dim_feedforward=4 * cfg.d_token, dropout=0.0,
                activation="gelu", batch_first=True,
            )
            for _ in range(self.TEXT_LAYERS)
        )
        self.text_proj = torch.nn.Linear(cfg.d_token, cfg.d_embed)
        if self._grid is not None:
            patch_px = cfg.input_size // self._grid
            patch_dim = 3 * patch_px * patch_px
        else:
            patch_dim = 3  # placeholder; encode_image rejects non-square grids
        self.patch_embed = torch.nn.Linear(patch_dim, cfg.d_patch)
        self.patch_block = torch.nn.TransformerEncoderLayer(
            d_model=cfg.d_patch, nhead=1, dim_feedforward=4 * cfg.d_patch,
            dropout=0.0, activation="gelu", batch_first=True,
        )
        flat = 3 * cfg.input_size * cfg.input_size
        self.global_net = torch.nn.Sequential(
            torch.nn.Linear(flat, 128),
            torch.nn.Tanh(),
            torch.nn.Linear(128, cfg.d_embed),
        )

    @property
    def tokenizer(self) -> ToyTokenizer:
        return self._tokenizer

    # ----- image side -------------------------------------------------

    def _load_pixels(self, image) -> np.ndarray:
        """Return a float64 (H, W, 3) array in [0, 1]."""
        if isinstance(image, (str, Path)):
            try:
                with Image.open(image) as im:
                    pil = im.convert("RGB")
            except (OSError, ValueError) as exc:
                raise InputError(f"cannot decode image {image}: {exc}") from exc
        elif isinstance(image, Image.Image):
            pil = image.convert("RGB")
        elif isinstance(image, np.ndarray):
            arr = image
            if arr.ndim != 3 or arr.shape[2] != 3:
                raise InputError("array images must have shape (H, W, 3)")
            if arr.dtype == np.uint8:
                return self._resize(arr.astype(np.float64) / 255.0)
            return self._resize(arr.astype(np.float64))
        else:
            raise InputError(f"unsupported image input type {type(image)!r}")
        arr = np.asarray(pil, dtype=np.float64) / 255.0
        return self._resize(arr)

    def _resize(self, arr: np.ndarray) -> np.ndarray:
        size = self.config.input_size
        if arr.shape[0] == size and arr.shape[1] == size:
            return arr
        # resize each channel in float mode to avoid uint8 quantization
        channels = []
        for c in range(3):
            im = Image.fromarray(arr[:, :, c].astype(np.float32), mode="F")
            im = im.resize((size, size), Image.BILINEAR)
            channels.append(np.asarray(im, dtype=np.float64))
        return np.stack(channels, axis=2)

    def encode_image(self, image) -> ImageFeatures:
        cfg = self.config
        if self._grid is None:
            raise ConfigError(
                f"toy backbone needs a square patch grid; m_patches={cfg.m_patches}"
            )
        pixels = self._load_pixels(image)
        with torch.no_grad():
            x = torch.from_numpy(pixels).to(self.dtype)  # (H, W, 3)
            g = self._grid
            px = cfg.input_size // g
            # (g, px, g, px, 3) -> (g, g, px, px, 3) -> (m, patch_dim)
            tiles = x.reshape(g, px, g, px, 3).permute(0, 2, 1, 3, 4)
            tiles = tiles.reshape(cfg.m_patches, -1)
            emb = self.patch_embed(tiles)
            emb = emb + sinusoidal_positions(cfg.m_patches, cfg.d_patch, self.dtype)
            patches = self.patch_block(emb.unsqueeze(0)).squeeze(0)
            flat = x.permute(2, 0, 1).reshape(1, -1)
            global_embed = self.global_net(flat).squeeze(0)
        return ImageFeatures(global_embed=global_embed, patches=patches)

    # ----- text side --------------------------------------------------

    def encode_text(self, seq: TokenSequence) -> torch.Tensor:
        cfg = self.config
        if len(seq) == 0:
            raise InputError("cannot encode an empty token sequence")
        if len(seq) > cfg.max_text_len:
            raise InputError(
                f"token sequence length {len(seq)} exceeds max_text_len {cfg.max_text_len}"
            )
        for pos, vec in seq.slots:
            if seq.ids[pos] != ToyTokenizer.SLOT_ID:
                raise InputError(f"slot position {pos} does not hold the slot id")
            if vec.shape[0] != cfg.d_token:
                raise InputError(
                    f"slot vector has dim {vec.shape[0]}, expected {cfg.d_token}"
                )
        ids = torch.tensor(seq.ids, dtype=torch.long)
        emb = self.token_table.weight[ids]
        if seq.slots:
            positions = torch.tensor([pos for pos, _ in seq.slots], dtype=torch.long)
            values = torch.stack([vec.to(self.dtype) for _, vec in seq.slots])
            emb = emb.index_put((positions,), values)
        emb = emb + sinusoidal_positions(len(seq), cfg.d_token, self.dtype)
        h = emb.unsqueeze(0)
        for block in self.text_blocks:
            h = block(h)
        pooled = h.squeeze(0).mean(dim=0)
        return self.text_proj(pooled)


def load_backbone(cfg: dict[str, str], dtype: torch.dtype = torch.float32) -> Backbone:
    """Instantiate the backbone named by ``backbone.name``.

    ``toy`` builds the seeded toy backbone. ``plugin:<module>:<attr>`` (or
    ``plugin:<file.py>:<attr>``) imports a factory and calls it with the flat
    config dict and dtype; the factory must return a Backbone implementation.
    """
    name = configmod.get_str(cfg, "backbone.name")
    if name == "toy":
        return ToyBackbone(BackboneConfig.from_flat(cfg), dtype=dtype)
    if name.startswith("plugin:"):
        spec = name[len("plugin:"):]
        module_part, sep, attr = spec.rpartition(":")
        if not sep or not module_part:
            raise ConfigError(
                "plugin backbone must be plugin:<module>:<attr>, got " + name
            )
        if module_part.endswith(".py"):
            modspec = importlib.util.spec_from_file_location("fticir_plugin", module_part)
            if modspec is None or modspec.loader is None:
                raise ConfigError(f"cannot load plugin file {module_part}")
            module = importlib.util.module_from_spec(modspec)
            modspec.loader.exec_module(module)
        else:
            try:
                module = importlib.import_module(module_part)
            except ImportError as exc:
                raise ConfigError(f"cannot import plugin module {module_part}: {exc}") from exc
        try:
            factory = getattr(module, attr)
        except AttributeError as exc:
            raise ConfigError(f"plugin module has no attribute {attr!r}") from exc
        backbone = factory(cfg, dtype)
        for required in ("encode_image", "encode_text", "tokenizer", "config"):
            if not hasattr(backbone, required):
                raise ConfigError(f"plugin backbone lacks {required!r}")
        return backbone
    raise ConfigError(f"backbone.name must be 'toy' or 'plugin:<path>', got {name!r}")
