"""Procedural toy corpus: colored shapes with lexicon captions.

Each image shows one to three copies of a shape, at a named position, on a
colored background; the caption describes exactly that. Because the caption
vocabulary is closed, the built-in LexiconTagger splits every caption at the
shape word, and the generator records the intended subject/attribute boundary
so tests can check the splitter against ground truth.

Run ``python -m fticir.toydata --out DIR --count 200 --seed 0`` to materialize
a corpus (images/ plus captions.tsv plus meta.jsonl).
"""

from __future__ import annotations

import argparse
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

SHAPES = ("circle", "square", "triangle", "cross", "ring")
COUNTS = ((1, "one"), (2, "two"), (3, "three"))
SIZES = (("small", 6), ("large", 11))
COLORS = {
    "red": (220, 40, 40),
    "green": (40, 180, 70),
    "blue": (50, 90, 220),
    "yellow": (235, 220, 60),
    "purple": (150, 60, 200),
    "orange": (240, 140, 40),
    "cyan": (60, 200, 220),
    "white": (245, 245, 245),
}
BACKGROUNDS = {
    "black": (15, 15, 15),
    "gray": (128, 128, 128),
    "navy": (25, 30, 80),
    "olive": (100, 110, 40),
    "brown": (110, 70, 40),
    "teal": (20, 110, 110),
}
POSITIONS = {
    "near the top": (0.5, 0.22),
    "near the bottom": (0.5, 0.78),
    "on the left": (0.22, 0.5),
    "on the right": (0.78, 0.5),
    "in the center": (0.5, 0.5),
}


@dataclass(frozen=True)
class ToyRecord:
    """Ground truth for one generated image."""

    image_id: str
    caption: str
    subject: str
    attribute: str
    shape: str
    count: int
    size: str
    color: str
    background: str
    position: str


def _caption_parts(shape: str, count: int, count_word: str, size: str,
                   color: str, background: str, position: str) -> tuple[str, str]:
    noun = shape if count == 1 else shape + "s"
    subject = f"{count_word} {size} {color} {noun}"
    attribute = f"on a {background} background {position}"
    return subject, attribute


def sample_record(image_id: str, rng: np.random.Generator) -> ToyRecord:
    shape = SHAPES[rng.integers(len(SHAPES))]
    count, count_word = COUNTS[rng.integers(len(COUNTS))]
    size, _ = SIZES[rng.integers(len(SIZES))]
    color = list(COLORS)[rng.integers(len(COLORS))]
    background = list(BACKGROUNDS)[rng.integers(len(BACKGROUNDS))]
    position = list(POSITIONS)[rng.integers(len(POSITIONS))]
    subject, attribute = _caption_parts(
        shape, count, count_word, size, color, background, position
    )
    return ToyRecord(
        image_id=image_id,
        caption=f"{subject} {attribute}",
        subject=subject,
        attribute=attribute,
        shape=shape,
        count=count,
        size=size,
        color=color,
        background=background,
        position=position,
    )


def _draw_shape(draw: ImageDraw.ImageDraw, shape: str, cx: int, cy: int,
                radius: int, rgb: tuple[int, int, int]):
    box = (cx - radius, cy - radius, cx + radius, cy + radius)
    if shape == "circle":
        draw.ellipse(box, fill=rgb)
    elif shape == "square":
        draw.rectangle(box, fill=rgb)
    elif shape == "triangle":
        draw.polygon(
            [(cx, cy - radius), (cx - radius, cy + radius), (cx + radius, cy + radius)],
            fill=rgb,
        )
    elif shape == "cross":
        arm = max(radius // 3, 2)
        draw.rectangle((cx - arm, cy - radius, cx + arm, cy + radius), fill=rgb)
        draw.rectangle((cx - radius, cy - arm, cx + radius, cy + arm), fill=rgb)
    elif shape == "ring":
        draw.ellipse(box, outline=rgb, width=max(radius // 3, 2))
    else:
        raise ValueError(f"unknown shape {shape!r}")


def render_image(record: ToyRecord, size: int = 64) -> Image.Image:
    image = Image.new("RGB", (size, size), BACKGROUNDS[record.background])
    draw = ImageDraw.Draw(image)
    radius = dict(SIZES)[record.size]
    fx, fy = POSITIONS[record.position]
    cx, cy = int(fx * size), int(fy * size)
    spread = radius * 2 + 3
    offsets = {
        1: [0],
        2: [-spread // 2, spread // 2],
        3: [-spread, 0, spread],
    }[record.count]
    for off in offsets:
        _draw_shape(draw, record.shape, cx + off, cy, radius,
                    COLORS[record.color])
    return image


def synthetic_records(count: int, seed: int = 0) -> list[ToyRecord]:
    """Deterministic list of records without touching the filesystem."""
    rng = np.random.default_rng(seed)
    width = max(3, len(str(count - 1)))
    return [
        sample_record(f"img_{i:0{width}d}", rng) for i in range(count)
    ]


def generate_corpus(
    out_dir: str | Path, count: int = 200, seed: int = 0, size: int = 64
) -> list[ToyRecord]:
    """Write images/, captions.tsv, and meta.jsonl under out_dir."""
    out_dir = Path(out_dir)
    image_dir = out_dir / "images"
    image_dir.mkdir(parents=True, exist_ok=True)
    records = synthetic_records(count, seed)
    caption_lines = []
    meta_lines = []
    for record in records:
        render_image(record, size).save(image_dir / f"{record.image_id}.png")
        caption_lines.append(f"{record.image_id}\t{record.caption}")
        meta_lines.append(json.dumps(asdict(record)))
    (out_dir / "captions.tsv").write_text(
        "\n".join(caption_lines) + "\n", encoding="utf-8"
    )
    (out_dir / "meta.jsonl").write_text(
        "\n".join(meta_lines) + "\n", encoding="utf-8"
    )
    return records


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        description="generate the procedural shape corpus"
    )
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--count", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--size", type=int, default=64)
    args = parser.parse_args(argv)
    records = generate_corpus(args.out, args.count, args.seed, args.size)
    print(f"wrote {len(records)} images to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
