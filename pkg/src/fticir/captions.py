"""Caption storage and captioner plugins.

Captions live in a UTF-8 TSV file, one ``id<TAB>caption`` line per image.
Training looks captions up by image id; a missing id is an error surfaced
before any parameter update. Captions are treated as lowercase sentences:
lookups return the stored text stripped and lowercased.

A captioner plugin is any callable ``(image_path) -> str``; the ``caption``
CLI verb uses one to build the TSV for an image directory.
"""

from __future__ import annotations

import importlib
import importlib.util
from pathlib import Path

from .errors import CaptionNotFoundError, ConfigError, DataError


class CaptionSource:
    """In-memory id -> caption map backed by a TSV file."""

    def __init__(self, captions: dict[str, str]):
        self._captions = dict(captions)

    @classmethod
    def load(cls, path: str | Path) -> "CaptionSource":
        captions: dict[str, str] = {}
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise DataError(f"cannot read caption file {path}: {exc}") from exc
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            if "\t" not in line:
                raise DataError(f"{path}:{lineno}: expected id<TAB>caption")
            image_id, caption = line.split("\t", 1)
            image_id = image_id.strip()
            if not image_id:
                raise DataError(f"{path}:{lineno}: empty image id")
            captions[image_id] = caption
        return cls(captions)

    def save(self, path: str | Path):
        lines = [f"{image_id}\t{caption}" for image_id, caption in
                 sorted(self._captions.items())]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def get(self, image_id: str) -> str:
        if image_id not in self._captions:
            raise CaptionNotFoundError(image_id)
        caption = self._captions[image_id].strip().lower()
        if not caption:
            raise DataError(f"caption for {image_id!r} is empty")
        return caption

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._captions

    def __len__(self) -> int:
        return len(self._captions)

    def ids(self) -> list[str]:
        return sorted(self._captions)


def load_captioner(spec: str):
    """Resolve a captioner plugin from ``module:attr`` or ``file.py:attr``."""
    module_part, sep, attr = spec.rpartition(":")
    if not sep or not module_part:
        raise ConfigError(f"captioner must be <module>:<attr>, got {spec!r}")
    if module_part.endswith(".py"):
        modspec = importlib.util.spec_from_file_location("fticir_captioner", module_part)
        if modspec is None or modspec.loader is None:
            raise ConfigError(f"cannot load captioner file {module_part}")
        module = importlib.util.module_from_spec(modspec)
        modspec.loader.exec_module(module)
    else:
        try:
            module = importlib.import_module(module_part)
        except ImportError as exc:
            raise ConfigError(f"cannot import captioner module {module_part}: {exc}") from exc
    try:
        captioner = getattr(module, attr)
    except AttributeError as exc:
        raise ConfigError(f"captioner module has no attribute {attr!r}") from exc
    if not callable(captioner):
        raise ConfigError(f"captioner {spec!r} is not callable")
    return captioner


def build_captions(image_dir: str | Path, captioner) -> CaptionSource:
    """Caption every image in a directory (sorted by id) with a plugin."""
    image_dir = Path(image_dir)
    if not image_dir.is_dir():
        raise DataError(f"image directory {image_dir} does not exist")
    captions: dict[str, str] = {}
    for path in sorted(image_dir.iterdir()):
        if not path.is_file():
            continue
        caption = str(captioner(str(path))).strip().lower()
        if not caption:
            raise DataError(f"captioner returned empty caption for {path.name}")
        captions[path.stem] = caption
    if not captions:
        raise DataError(f"no images found in {image_dir}")
    return CaptionSource(captions)
