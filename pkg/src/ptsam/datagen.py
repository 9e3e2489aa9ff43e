"""Synthetic microscopy-like segmentation corpora, augmentation, few-shot
splits and PGM corpus I/O."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage


class DataError(ValueError):
    pass


class FormatError(DataError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # float32 [1, h, w] in [0, 1]
    mask: np.ndarray  # uint8 [h, w] in {0, 1}
    id: str

    def __post_init__(self):
        if self.image.ndim == 2:
            self.image = self.image[None]
        if self.image.shape[1:] != self.mask.shape:
            raise DataError(f"sample {self.id}: image {self.image.shape} vs mask {self.mask.shape}")


@dataclass
class DatasetSplit:
    train: list[Sample]
    test: list[Sample]
    corpus_seed: int
    split_seed: int = 0

    def train_ids(self) -> list[str]:
        return [s.id for s in self.train]

    def test_ids(self) -> list[str]:
        return [s.id for s in self.test]


SHIFTS = ("invert-contrast", "blur", "haze")
# shift used for the domain-shifted target corpus in experiments
DEFAULT_SHIFT = ("haze",)


@dataclass
class GenSpec:
    count: int = 100
    size: int = 64
    objects_min: int = 2
    objects_max: int = 5
    kind: str = "ellipse-blob"
    radius_min: float = 4.0
    radius_max: float = 10.0
    contrast_min: float = 0.35
    contrast_max: float = 0.7
    background: float = 0.2
    texture_scale: float = 4.0
    texture_amp: float = 0.08
    noise_sigma: float = 0.02
    shift: tuple[str, ...] = ()
    shift_blur_sigma: float = 1.5
    shift_haze_alpha: float = 0.5

    def __post_init__(self):
        if isinstance(self.shift, str):
            self.shift = tuple(s.strip() for s in self.shift.split(",") if s.strip())
        self.shift = tuple(self.shift)
        for s in self.shift:
            if s not in SHIFTS:
                raise DataError(f"unknown shift {s!r}; choose from {SHIFTS}")
        if self.kind not in ("ellipse-blob", "soft-particle"):
            raise DataError(f"unknown object kind {self.kind!r}")
        if self.objects_min > self.objects_max or self.objects_min < 0:
            raise DataError(f"bad object range [{self.objects_min}, {self.objects_max}]")

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name}={','.join(v) if isinstance(v, tuple) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GenSpec":
        types = {f.name: f.type for f in dataclasses.fields(cls)}
        kw = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if not sep or key not in types:
                raise DataError(f"genspec line {lineno}: unknown key {key!r}")
            t = types[key]
            if t == "int":
                kw[key] = int(val)
            elif t == "float":
                kw[key] = float(val)
            else:
                kw[key] = val
        return cls(**kw)


_SS = 4  # supersampling factor for anti-aliased coverage


def _coverage(size: int, cy: float, cx: float, ry: float, rx: float, theta: float, kind: str) -> np.ndarray:
    if kind == "ellipse-blob":
        c = (np.arange(size * _SS) + 0.5) / _SS
        yy, xx = np.meshgrid(c, c, indexing="ij")
        dy, dx = yy - cy, xx - cx
        ct, st = np.cos(theta), np.sin(theta)
        u = (ct * dx + st * dy) / rx
        v = (-st * dx + ct * dy) / ry
        inside = (u * u + v * v) <= 1.0
        return inside.reshape(size, _SS, size, _SS).mean(axis=(1, 3))
    # soft-particle: disk with a linear edge ramp of one pixel
    c = np.arange(size) + 0.5
    yy, xx = np.meshgrid(c, c, indexing="ij")
    r = np.hypot(yy - cy, xx - cx)
    rad = 0.5 * (ry + rx)
    return np.clip(rad - r + 0.5, 0.0, 1.0)


def _texture(rng: np.random.Generator, size: int, scale: float, amp: float) -> np.ndarray:
    noise = rng.standard_normal((size, size))
    if amp == 0:
        return np.zeros((size, size))
    t = ndimage.gaussian_filter(noise, scale, mode="wrap") if scale > 0 else noise
    t = t / (np.abs(t).max() + 1e-12)
    return amp * t


def apply_shift(img: np.ndarray, spec: GenSpec) -> np.ndarray:
    out = img
    for s in spec.shift:
        if s == "invert-contrast":
            out = 1.0 - out
        elif s == "blur":
            out = ndimage.gaussian_filter(out, spec.shift_blur_sigma, mode="reflect")
        elif s == "haze":
            out = (1.0 - spec.shift_haze_alpha) * out + spec.shift_haze_alpha * 0.5
    return out


def render(spec: GenSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    n = spec.size
    img = spec.background + _texture(rng, n, spec.texture_scale, spec.texture_amp)
    layer = np.zeros((n, n))
    mask = np.zeros((n, n), dtype=bool)
    for _ in range(int(rng.integers(spec.objects_min, spec.objects_max + 1))):
        ry, rx = rng.uniform(spec.radius_min, spec.radius_max, size=2)
        cy, cx = rng.uniform(0, n, size=2)
        theta = rng.uniform(0, np.pi)
        contrast = rng.uniform(spec.contrast_min, spec.contrast_max)
        cov = _coverage(n, cy, cx, ry, rx, theta, spec.kind)
        layer = np.maximum(layer, contrast * cov)
        mask |= cov >= 0.5
    img = np.clip(img + layer, 0.0, 1.0)
    img = apply_shift(img, spec)
    if spec.noise_sigma > 0:
        img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32), mask.astype(np.uint8)


def generate(spec: GenSpec, seed: int) -> list[Sample]:
    """Deterministic corpus for (spec, seed); one child seed per image."""
    out = []
    for i in range(spec.count):
        rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
        img, mask = render(spec, rng)
        out.append(Sample(img[None], mask, f"img{i:04d}"))
    return out


def split(corpus: Sequence[Sample], train_n: int, seed: int, corpus_seed: int = 0, test_frac: float = 0.2) -> DatasetSplit:
    """Fixed test set (last ``test_frac`` under the corpus-seeded permutation)
    and ``train_n`` training samples drawn from the remainder under ``seed``."""
    n = len(corpus)
    n_test = int(round(test_frac * n))
    if train_n < 1 or train_n + n_test > n:
        raise DataError(f"corpus of {n} cannot supply {train_n} training + {n_test} test samples")
    perm = np.random.default_rng(np.random.SeedSequence([corpus_seed, 0x7E57])).permutation(n)
    test_idx = perm[n - n_test :]
    pool = perm[: n - n_test]
    chosen = np.random.default_rng(np.random.SeedSequence([seed, 0x7A1])).permutation(pool.size)[:train_n]
    return DatasetSplit(
        train=[corpus[int(pool[i])] for i in chosen],
        test=[corpus[int(i)] for i in sorted(test_idx)],
        corpus_seed=corpus_seed,
        split_seed=seed,
    )


# ---------------------------------------------------------------- augmentation

AUGMENTATIONS = ("rotate", "crop", "elastic", "hflip", "vflip", "noise", "gamma", "brightness", "contrast")


@dataclass
class AugmentDraw:
    flags: dict[str, bool]
    params: dict[str, float] = field(default_factory=dict)


def draw_augmentation(sub_seed, p: float = 0.5) -> tuple[AugmentDraw, np.random.Generator]:
    rng = np.random.default_rng(sub_seed)
    u = rng.random(len(AUGMENTATIONS))
    flags = {name: bool(x < p) for name, x in zip(AUGMENTATIONS, u)}
    params = {
        "angle": rng.uniform(-30.0, 30.0),
        "crop_scale": rng.uniform(0.7, 1.0),
        "crop_y": rng.random(),
        "crop_x": rng.random(),
        "elastic_alpha": rng.uniform(0.0, 10.0),
        "noise_sigma": rng.uniform(0.0, 0.05),
        "gamma": rng.uniform(0.7, 1.5),
        "brightness": rng.uniform(-0.2, 0.2),
        "contrast": rng.uniform(0.7, 1.3),
    }
    return AugmentDraw(flags, params), rng


def _resample(img: np.ndarray, mask: np.ndarray, yy: np.ndarray, xx: np.ndarray, mode: str) -> tuple[np.ndarray, np.ndarray]:
    coords = np.stack([yy, xx])
    out_img = ndimage.map_coordinates(img, coords, order=1, mode=mode)
    out_mask = ndimage.map_coordinates(mask, coords, order=0, mode=mode)
    return out_img, out_mask


def augment(s: Sample, sub_seed, p: float = 0.5) -> Sample:
    """Random geometric + photometric transform of one sample.

    Every transform fires independently with probability ``p``. Geometry is
    shared between image (bilinear) and mask (nearest); photometric changes
    touch the image only.
    """
    draw, rng = draw_augmentation(sub_seed, p)
    f, prm = draw.flags, draw.params
    img = s.image[0].astype(np.float64)
    mask = s.mask.astype(np.uint8)
    h, w = mask.shape
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")

    if f["rotate"]:
        a = np.deg2rad(prm["angle"])
        cy, cx = (h - 1) / 2, (w - 1) / 2
        sy = cy + np.cos(a) * (yy - cy) - np.sin(a) * (xx - cx)
        sx = cx + np.sin(a) * (yy - cy) + np.cos(a) * (xx - cx)
        img, mask = _resample(img, mask, sy, sx, "reflect")
    if f["crop"]:
        sc = prm["crop_scale"]
        ch, cw = sc * (h - 1), sc * (w - 1)
        oy, ox = prm["crop_y"] * (h - 1 - ch), prm["crop_x"] * (w - 1 - cw)
        sy = oy + yy * (ch / (h - 1))
        sx = ox + xx * (cw / (w - 1))
        img, mask = _resample(img, mask, sy, sx, "nearest")
    if f["elastic"]:
        field_y = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), 8.0, mode="reflect")
        field_x = ndimage.gaussian_filter(rng.uniform(-1, 1, (h, w)), 8.0, mode="reflect")
        norm = max(np.abs(field_y).max(), np.abs(field_x).max(), 1e-12)
        amp = prm["elastic_alpha"] / norm
        img, mask = _resample(img, mask, yy + amp * field_y, xx + amp * field_x, "reflect")
    if f["hflip"]:
        img, mask = img[:, ::-1], mask[:, ::-1]
    if f["vflip"]:
        img, mask = img[::-1, :], mask[::-1, :]
    if f["noise"]:
        img = img + rng.normal(0.0, prm["noise_sigma"], size=img.shape)
    if f["gamma"]:
        img = np.clip(img, 0.0, 1.0) ** prm["gamma"]
    if f["brightness"]:
        img = img + prm["brightness"]
    if f["contrast"]:
        m = img.mean()
        img = (img - m) * prm["contrast"] + m
    if any(f.values()):
        img = np.clip(img, 0.0, 1.0)
        return Sample(np.ascontiguousarray(img, dtype=np.float32)[None], np.ascontiguousarray(mask, dtype=np.uint8), s.id)
    return Sample(s.image.copy(), s.mask.copy(), s.id)


def threshold_oracle_dice(samples: Sequence[Sample], levels: int = 256) -> tuple[float, float]:
    """Best mean Dice over global thresholds "pixel > t" and the threshold used."""
    imgs = np.stack([s.image[0] for s in samples])
    gts = np.stack([s.mask for s in samples]).astype(bool)
    best, best_t = -1.0, 0.0
    gsum = gts.reshape(len(samples), -1).sum(axis=1)
    for t in (np.arange(levels) + 0.5) / levels:
        pred = imgs > t
        inter = (pred & gts).reshape(len(samples), -1).sum(axis=1)
        psum = pred.reshape(len(samples), -1).sum(axis=1)
        denom = psum + gsum
        dice = np.where(denom == 0, 1.0, 2 * inter / np.maximum(denom, 1))
        if dice.mean() > best:
            best, best_t = float(dice.mean()), float(t)
    return best, best_t


# ---------------------------------------------------------------- PGM I/O


def _read_token(buf: bytes, pos: int) -> tuple[bytes, int]:
    n = len(buf)
    while pos < n:
        if buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif buf[pos : pos + 1].isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos : pos + 1].isspace() and buf[pos : pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError(f"PGM header truncated at byte {start}")
    return buf[start:pos], pos


def read_pgm_bytes(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    """Parse a binary (P5) PGM with maxval 255 into a uint8 array."""
    magic, pos = _read_token(buf, 0)
    if magic != b"P5":
        raise FormatError(f"{source}: bad magic {magic!r} at byte 0 (expected P5)")
    fields = []
    for what in ("width", "height", "maxval"):
        tok, new = _read_token(buf, pos)
        if not tok.isdigit():
            raise FormatError(f"{source}: non-numeric {what} {tok!r} at byte {new - len(tok)}")
        fields.append(int(tok))
        pos = new
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"{source}: maxval {maxval} at byte {pos - len(str(maxval))} (only 255 supported)")
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError(f"{source}: missing whitespace after header at byte {pos}")
    pos += 1
    data = buf[pos:]
    if len(data) != w * h:
        raise FormatError(f"{source}: expected {w * h} pixel bytes from byte {pos}, found {len(data)}")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def write_pgm(path: str | Path, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    if arr.dtype != np.uint8:
        raise FormatError(f"write_pgm needs uint8 data, got {arr.dtype}")
    h, w = arr.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(arr).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    return read_pgm_bytes(Path(path).read_bytes(), str(path))


def image_to_u8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def read_image(path: str | Path) -> np.ndarray:
    return (read_pgm(path).astype(np.float32) / np.float32(255.0))[None]


def read_mask(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    arr = read_pgm_bytes(raw, str(path))
    bad = np.flatnonzero((arr != 0) & (arr != 255))
    if bad.size:
        k = int(bad[0])
        r, c = divmod(k, arr.shape[1])
        offset = len(raw) - arr.size + k
        raise FormatError(f"{path}: mask pixel (row {r}, col {c}) has value {arr.flat[k]} at byte {offset}; masks must be 0 or 255")
    return (arr == 255).astype(np.uint8)


def write_corpus(samples: Sequence[Sample], out: str | Path, spec: GenSpec | None = None) -> None:
    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for s in samples:
        write_pgm(out / "images" / f"{s.id}.pgm", image_to_u8(s.image[0]))
        write_pgm(out / "masks" / f"{s.id}.pgm", (s.mask * 255).astype(np.uint8))
    (out / "manifest.txt").write_text("".join(f"{s.id}\n" for s in samples))
    if spec is not None:
        (out / "genspec.txt").write_text(spec.to_text())


def read_corpus(root: str | Path) -> list[Sample]:
    root = Path(root)
    ids = [ln.strip() for ln in (root / "manifest.txt").read_text().splitlines() if ln.strip()]
    return [Sample(read_image(root / "images" / f"{i}.pgm"), read_mask(root / "masks" / f"{i}.pgm"), i) for i in ids]


def quantize(samples: Sequence[Sample]) -> list[Sample]:
    """Round images to 8-bit levels, as a PGM write/read round trip would."""
    return [Sample((image_to_u8(s.image[0]).astype(np.float32) / np.float32(255.0))[None], s.mask.copy(), s.id) for s in samples]
