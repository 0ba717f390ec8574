import numpy as np

PINK = (225, 160, 190)
WHITE = 248


def pink_texture(shape=(224, 224), sigma=12, seed=0, base=PINK):
    """Speckled tissue-like patch; the texture keeps the blur rule quiet."""
    rng = np.random.default_rng(seed)
    img = np.tile(np.array(base, dtype=np.float64), (*shape, 1))
    img += rng.normal(0, sigma, (*shape, 3))
    return np.clip(img, 0, 255).astype(np.uint8)


def tissue_slide_image(width=896, height=672, tissue_box=(112, 112, 672, 448),
                       seed=0, artefact_boxes=()):
    """White slide with one textured-tissue rectangle and optional black
    artefact rectangles (x, y, w, h in pixels)."""
    rng = np.random.default_rng(seed)
    img = np.clip(
        rng.normal(WHITE, 2, (height, width, 3)), 0, 255
    ).astype(np.uint8)
    x, y, w, h = tissue_box
    img[y : y + h, x : x + w] = pink_texture((h, w), seed=seed + 1)
    for bx, by, bw, bh in artefact_boxes:
        img[by : by + bh, bx : bx + bw] = 8
    return img
