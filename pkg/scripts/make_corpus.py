"""Build the local image corpus from photographs bundled with scikit-image.

Writes Kodak-geometry (768x512 landscape) PPMs plus a downscaled desk-scale
copy, each with a manifest.json that tags a calibration and an evaluation
split. Requires scikit-image and Pillow; the progtx package itself needs
neither.

    python scripts/make_corpus.py --out data
"""

import argparse
import sys
from pathlib import Path

import numpy as np
from PIL import Image

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))
from progtx.imageio import Corpus, CorpusEntry, ImageBuffer, save_ppm, write_manifest  # noqa: E402

KODAK_SIZE = (768, 512)

# name -> (skimage loader, crop box as fractions (left, top, right, bottom) or None, split)
SOURCES = {
    "astronaut": ("astronaut", None, "evaluation"),
    "chelsea": ("chelsea", None, "evaluation"),
    "coffee": ("coffee", None, "evaluation"),
    "immuno": ("immunohistochemistry", None, "evaluation"),
    "rocket": ("rocket", None, "evaluation"),
    "camera": ("camera", None, "calibration"),
    "hubble_a": ("hubble_deep_field", (0.0, 0.0, 0.6, 0.6), "calibration"),
    "hubble_b": ("hubble_deep_field", (0.4, 0.4, 1.0, 1.0), "calibration"),
    "retina": ("retina", (0.2, 0.25, 0.8, 0.75), "calibration"),
}


def _load(loader: str) -> np.ndarray:
    import skimage.data

    img = np.asarray(getattr(skimage.data, loader)())
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    return img[:, :, :3].astype(np.uint8)


def _fit(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Centre-crop to the target aspect ratio, then resample with Lanczos."""
    h, w = img.shape[:2]
    tw, th = size
    if w * th > h * tw:
        cw = h * tw // th
        x0 = (w - cw) // 2
        img = img[:, x0:x0 + cw]
    else:
        ch = w * th // tw
        y0 = (h - ch) // 2
        img = img[y0:y0 + ch]
    return np.asarray(Image.fromarray(img).resize(size, Image.LANCZOS))


def build(out: Path, desk_scale: int = 8, names=None) -> dict[str, Path]:
    """Write ``out/kodak`` and ``out/desk`` corpora; return their manifest paths."""
    manifests = {}
    sizes = {"kodak": KODAK_SIZE,
             "desk": (KODAK_SIZE[0] // desk_scale, KODAK_SIZE[1] // desk_scale)}
    for tier, size in sizes.items():
        root = out / tier
        root.mkdir(parents=True, exist_ok=True)
        entries = []
        for name, (loader, crop, split) in SOURCES.items():
            if names is not None and name not in names:
                continue
            img = _load(loader)
            if crop is not None:
                h, w = img.shape[:2]
                l, t, r, b = crop
                img = img[int(t * h):int(b * h), int(l * w):int(r * w)]
            path = root / f"{name}.ppm"
            save_ppm(ImageBuffer(_fit(img, size)), path)
            entries.append(CorpusEntry(name, path, split))
        manifest = root / "manifest.json"
        write_manifest(Corpus(tuple(entries)), manifest)
        manifests[tier] = manifest
    return manifests


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=Path("data"))
    ap.add_argument("--desk-scale", type=int, default=8,
                    help="downscale factor for the desk-scale tier")
    args = ap.parse_args(argv)
    for tier, path in build(args.out, args.desk_scale).items():
        print(f"{tier}: {path}")


if __name__ == "__main__":
    main()
