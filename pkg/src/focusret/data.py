"""Dataset ingestion, tokenisation, scene prompts, synthetic data and batching.

File formats
------------
Manifest: JSON lines, one object per image with exactly the keys
``{"image": str, "captions": [5 x str], "scene": str}``. ``image`` is a
path relative to the manifest's directory.

Image (``.cmim``): ``b"CMIM"``, then little-endian u32 height, width,
channels, then ``height*width*channels`` little-endian float64 values in
row-major ``(row, column, channel)`` order. Loaded images are ``[C, H, W]``.

Vocab: JSON object mapping token -> id. Ids 0-3 are ``<bos> <eos> <pad>
<unk>``; scene prompt tokens ``<scene:NAME>`` follow in scene-id order.
"""

from __future__ import annotations

import json
import re
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigError, ParseError, ValidationError
from .text import BOS, EOS, PAD, UNK

CAPTIONS_PER_IMAGE = 5
RESERVED = {"<bos>": BOS, "<eos>": EOS, "<pad>": PAD, "<unk>": UNK}
_TOKEN_RE = re.compile(r"[a-z0-9]+")
_CMIM_MAGIC = b"CMIM"


# -- image files -------------------------------------------------------------


def write_image(path: str | Path, image: np.ndarray) -> None:
    """Write a ``[C, H, W]`` float array as CMIM."""
    image = np.asarray(image, dtype=np.float64)
    c, h, w = image.shape
    payload = np.ascontiguousarray(image.transpose(1, 2, 0)).astype("<f8").tobytes()
    Path(path).write_bytes(_CMIM_MAGIC + struct.pack("<III", h, w, c) + payload)


def read_image(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:4] != _CMIM_MAGIC or len(raw) < 16:
        raise ParseError(f"{path}: not a CMIM image")
    h, w, c = struct.unpack("<III", raw[4:16])
    body = raw[16:]
    if len(body) != h * w * c * 8:
        raise ParseError(f"{path}: payload has {len(body)} bytes, expected {h * w * c * 8}")
    return np.frombuffer(body, dtype="<f8").reshape(h, w, c).transpose(2, 0, 1).astype(np.float64)


# -- manifest ----------------------------------------------------------------


@dataclass(frozen=True)
class ManifestRecord:
    image: str
    captions: tuple[str, ...]
    scene: str


@dataclass
class Manifest:
    records: list[ManifestRecord]
    scenes: dict[str, int]
    root: Path = field(default_factory=Path)

    def scene_names(self) -> list[str]:
        return sorted(self.scenes, key=self.scenes.get)

    def image_path(self, record: ManifestRecord) -> Path:
        return self.root / record.image


def _scene_vocab(records: Iterable[ManifestRecord]) -> dict[str, int]:
    scenes: dict[str, int] = {}
    for r in records:
        scenes.setdefault(r.scene, len(scenes))
    return scenes


def load_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    records = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ParseError(f"{path}:{lineno}: {exc.msg}") from None
            if not isinstance(obj, dict) or set(obj) != {"image", "captions", "scene"}:
                raise ParseError(f"{path}:{lineno}: expected keys image, captions, scene")
            caps = obj["captions"]
            if not isinstance(caps, list) or len(caps) != CAPTIONS_PER_IMAGE:
                n = len(caps) if isinstance(caps, list) else "no"
                raise ValidationError(
                    f"{path}:{lineno}: sample {obj['image']!r} has {n} captions, expected 5"
                )
            records.append(ManifestRecord(str(obj["image"]), tuple(map(str, caps)), str(obj["scene"])))
    return Manifest(records, _scene_vocab(records), path.parent)


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    lines = [
        json.dumps({"image": r.image, "captions": list(r.captions), "scene": r.scene})
        for r in manifest.records
    ]
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


# -- vocabulary --------------------------------------------------------------


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def scene_token(name: str) -> str:
    return f"<scene:{name}>"


@dataclass
class Vocab:
    token_to_id: dict[str, int]

    def __len__(self) -> int:
        return len(self.token_to_id)

    def __getitem__(self, token: str) -> int:
        return self.token_to_id.get(token, UNK)

    def encode(self, text: str) -> list[int]:
        return [self[t] for t in tokenize(text)]

    def scene_names(self) -> list[str]:
        items = [(i, t) for t, i in self.token_to_id.items() if t.startswith("<scene:")]
        return [t[len("<scene:") : -1] for _, t in sorted(items)]

    def scene_token_ids(self) -> list[int]:
        return [self.token_to_id[scene_token(s)] for s in self.scene_names()]

    def scene_prompt_id(self, scene_id: int) -> int:
        return self.scene_token_ids()[scene_id]

    def to_json(self) -> str:
        return json.dumps(self.token_to_id, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "Vocab":
        return cls({str(k): int(v) for k, v in json.loads(text).items()})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocab":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def build_vocab(manifest: Manifest, min_freq: int = 1) -> Vocab:
    """Reserved ids, then one prompt token per scene, then words by (-freq, token)."""
    counts = Counter(t for r in manifest.records for c in r.captions for t in tokenize(c))
    table = dict(RESERVED)
    for name in manifest.scene_names():
        table[scene_token(name)] = len(table)
    words = sorted((w for w, n in counts.items() if n >= min_freq), key=lambda w: (-counts[w], w))
    for w in words:
        table.setdefault(w, len(table))
    return Vocab(table)


def augment_with_scene(
    caption_tokens: Sequence[int],
    scene_id: Optional[int],
    vocab: Vocab,
    max_len: int,
    enabled: bool = True,
) -> list[int]:
    """``[BOS, <scene>, content..., EOS]``; content is truncated, never the prompt.

    ``caption_tokens`` are content ids without BOS/EOS.
    """
    prompt = [vocab.scene_prompt_id(scene_id)] if enabled and scene_id is not None else []
    room = max_len - 2 - len(prompt)
    if room < 0:
        raise ConfigError(f"max_len {max_len} leaves no room for the scene prompt")
    return [BOS, *prompt, *list(caption_tokens)[:room], EOS]


# -- samples and batches -----------------------------------------------------


@dataclass
class ImageRecord:
    """One image with its five captions (content token ids, no BOS/EOS)."""

    image: np.ndarray  # [C, H, W]
    captions: list[list[int]]
    scene_id: int
    sample_id: str


@dataclass
class PairedSample:
    image: np.ndarray
    caption_tokens: list[int]  # full sequence incl. BOS/EOS (and prompt)
    scene_id: int
    sample_id: str
    caption_index: int = 0


@dataclass
class Batch:
    samples: list[PairedSample]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def images(self) -> np.ndarray:
        return np.stack([s.image for s in self.samples])

    @property
    def tokens(self) -> list[list[int]]:
        return [s.caption_tokens for s in self.samples]

    @property
    def scene_ids(self) -> np.ndarray:
        return np.array([s.scene_id for s in self.samples], dtype=np.int64)


@dataclass
class Dataset:
    records: list[ImageRecord]
    vocab: Vocab
    scenes: list[str]

    def split(self, fractions=(0.8, 0.1, 0.1), seed: int = 0):
        return split_records(self.records, fractions, seed)


def load_dataset(manifest_path: str | Path, vocab: Optional[Vocab] = None, min_freq: int = 1) -> Dataset:
    manifest = load_manifest(manifest_path)
    vocab = vocab if vocab is not None else build_vocab(manifest, min_freq)
    return dataset_from_manifest(manifest, vocab, {r.image: read_image(manifest.image_path(r)) for r in manifest.records})


def dataset_from_manifest(manifest: Manifest, vocab: Vocab, images: dict[str, np.ndarray]) -> Dataset:
    vocab_scenes = vocab.scene_names()
    for name in manifest.scene_names():
        if name not in vocab_scenes:
            raise ValidationError(f"scene {name!r} has no prompt token in the vocabulary")
    records = [
        ImageRecord(
            image=images[r.image],
            captions=[vocab.encode(c) for c in r.captions],
            scene_id=vocab_scenes.index(r.scene),
            sample_id=Path(r.image).stem,
        )
        for r in manifest.records
    ]
    return Dataset(records, vocab, vocab_scenes)


def split_records(records: Sequence[ImageRecord], fractions=(0.8, 0.1, 0.1), seed: int = 0):
    """Deterministic shuffled train/val/test split by rounded fractions."""
    n = len(records)
    order = np.random.default_rng(seed).permutation(n)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    pick = lambda idx: [records[i] for i in sorted(idx)]  # noqa: E731
    return (
        pick(order[:n_train]),
        pick(order[n_train : n_train + n_val]),
        pick(order[n_train + n_val :]),
    )


def make_batches(
    records: Sequence[ImageRecord],
    batch_size: int,
    seed: int,
    epoch: int,
    vocab: Vocab,
    max_len: int,
    scene_prompt: bool = True,
) -> list[Batch]:
    """Shuffle per ``(seed, epoch)`` and drop the last partial batch.

    Image i in the original order uses caption ``(i + epoch) % 5``, so five
    consecutive epochs visit every caption once and a batch never holds two
    captions of the same image.
    """
    if batch_size < 2:
        raise ConfigError("batch_size must be >= 2")
    order = np.random.default_rng([seed, epoch]).permutation(len(records))
    batches = []
    for start in range(0, len(order) - batch_size + 1, batch_size):
        samples = []
        for i in order[start : start + batch_size]:
            rec = records[i]
            ci = (int(i) + epoch) % len(rec.captions)
            tokens = augment_with_scene(rec.captions[ci], rec.scene_id, vocab, max_len, scene_prompt)
            samples.append(PairedSample(rec.image, tokens, rec.scene_id, rec.sample_id, ci))
        batches.append(Batch(samples))
    return batches


# -- synthetic data ----------------------------------------------------------

SCENE_NAMES = (
    "airport", "beach", "bridge", "farmland", "forest", "harbor", "pond", "stadium",
    "desert", "river", "parking", "church", "meadow", "port", "square", "school",
)  # fmt: skip
_COLORS = {"red": (1.0, 0.1, 0.1), "green": (0.1, 1.0, 0.1), "blue": (0.1, 0.1, 1.0), "white": (1.0, 1.0, 1.0)}
_CORNERS = ("top left", "top right", "bottom left", "bottom right")
_TEMPLATES = (
    "a {scene} area with a {color} marker in the {pos}",
    "there is a {color} marker at the {pos} of the {scene}",
    "{scene} seen from above with a {color} spot at the {pos}",
    "an aerial image of a {scene} with a {color} object in the {pos}",
    "the {pos} of this {scene} contains a {color} marker",
)


def _scene_motif(rng: np.random.Generator, image_size: int, channels: int) -> np.ndarray:
    cells = 4
    mask = rng.random((cells, cells)) < 0.5
    mask[rng.integers(cells), rng.integers(cells)] = True
    block = image_size // cells
    big = np.kron(mask.astype(float), np.ones((block, block)))
    pad = image_size - big.shape[0]
    big = np.pad(big, ((0, pad), (0, pad)))
    base = rng.uniform(0.1, 0.5, size=channels)
    fore = rng.uniform(0.5, 0.9, size=channels)
    return base[:, None, None] * (1 - big) + fore[:, None, None] * big


def generate_synthetic(
    num_scenes: int = 8,
    images_per_scene: int = 16,
    image_size: int = 32,
    seed: int = 7,
    out_dir: Optional[str | Path] = None,
    channels: int = 3,
    noise: float = 0.05,
) -> tuple[Manifest, dict[str, np.ndarray]]:
    """Procedural scenes: a per-scene block motif plus a per-image colored marker.

    Captions name the scene and the marker's color and corner. When
    ``out_dir`` is given, ``manifest.jsonl`` and ``images/*.cmim`` are written.
    """
    if min(num_scenes, images_per_scene, image_size, channels) < 1:
        raise ConfigError("synthetic dataset parameters must be positive")
    rng = np.random.default_rng(seed)
    names = [SCENE_NAMES[i] if i < len(SCENE_NAMES) else f"scene{i}" for i in range(num_scenes)]
    motifs = [_scene_motif(rng, image_size, channels) for _ in names]
    mark = max(2, image_size // 8)
    records, images = [], {}
    for s, name in enumerate(names):
        for j in range(images_per_scene):
            color = list(_COLORS)[int(rng.integers(len(_COLORS)))]
            corner = int(rng.integers(len(_CORNERS)))
            img = motifs[s] + noise * rng.standard_normal((channels, image_size, image_size))
            r0 = 1 if corner < 2 else image_size - mark - 1
            c0 = 1 if corner % 2 == 0 else image_size - mark - 1
            rgb = np.resize(np.array(_COLORS[color]), channels)
            img[:, r0 : r0 + mark, c0 : c0 + mark] = rgb[:, None, None]
            img = np.clip(img, 0.0, 1.0)
            rel = f"images/{name}_{j:03d}.cmim"
            caps = tuple(t.format(scene=name, color=color, pos=_CORNERS[corner]) for t in _TEMPLATES)
            records.append(ManifestRecord(rel, caps, name))
            images[rel] = img
    root = Path(out_dir) if out_dir is not None else Path()
    manifest = Manifest(records, _scene_vocab(records), root)
    if out_dir is not None:
        (root / "images").mkdir(parents=True, exist_ok=True)
        for rel, img in images.items():
            write_image(root / rel, img)
        save_manifest(manifest, root / "manifest.jsonl")
    return manifest, images


def synthetic_dataset(num_scenes: int = 8, images_per_scene: int = 16, image_size: int = 32, seed: int = 7, **kw) -> Dataset:
    """In-memory convenience wrapper around :func:`generate_synthetic`."""
    manifest, images = generate_synthetic(num_scenes, images_per_scene, image_size, seed, **kw)
    return dataset_from_manifest(manifest, build_vocab(manifest), images)
