"""sRGB <-> CIE Lab conversion and chromaticity targets.

Conventions: RGB values are gamma-encoded sRGB in [0,1]; Lab uses the D65
white point (2-degree observer), with the white point taken as the row sums
of the sRGB->XYZ matrix so that neutral greys map to a = b = 0 exactly.
Arrays carry channels in the last axis: (..., 3) for RGB and Lab.

``extract_ab_target`` produces the regression target for colorization
pretraining: (a, b) scaled by 1/128 so values lie in (-1, 1) for everything
the sRGB gamut can produce.
"""

import numpy as np

from chromatile.errors import UsageError

AB_SCALE = 128.0

# sRGB (IEC 61966-2-1) linear-RGB -> XYZ under D65.
_RGB_TO_XYZ = np.array(
    [
        [0.4124564, 0.3575761, 0.1804375],
        [0.2126729, 0.7151522, 0.0721750],
        [0.0193339, 0.1191920, 0.9503041],
    ],
    dtype=np.float64,
)
_XYZ_TO_RGB = np.linalg.inv(_RGB_TO_XYZ)

# White point = transform of RGB (1,1,1); using the row sums (rather than
# nominal D65 constants) keeps the neutral axis at exactly a = b = 0.
_WHITE = _RGB_TO_XYZ.sum(axis=1)

_DELTA = 6.0 / 29.0
_F_CUBE = _DELTA**3
_F_SLOPE = 1.0 / (3.0 * _DELTA**2)


def _check_channels(arr, name):
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim < 1 or arr.shape[-1] != 3:
        raise UsageError(f"{name} must have 3 channels in the last axis")
    return arr


def srgb_linearize(c):
    """Gamma-decode sRGB to linear light."""
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def srgb_delinearize(c):
    """Gamma-encode linear light to sRGB."""
    c = np.asarray(c, dtype=np.float64)
    c = np.maximum(c, 0.0)
    return np.where(c <= 0.0031308, c * 12.92, 1.055 * c ** (1.0 / 2.4) - 0.055)


def _f_forward(t):
    return np.where(t > _F_CUBE, np.cbrt(t), _F_SLOPE * t + 4.0 / 29.0)


def _f_inverse(ft):
    return np.where(ft > _DELTA, ft**3, (ft - 4.0 / 29.0) / _F_SLOPE)


def srgb_to_lab(rgb):
    """(..., 3) sRGB in [0,1] -> (..., 3) Lab (L in [0,100], a/b unscaled)."""
    rgb = _check_channels(rgb, "rgb")
    linear = srgb_linearize(rgb)
    xyz = linear @ _RGB_TO_XYZ.T
    f = _f_forward(xyz / _WHITE)
    lab = np.empty_like(xyz)
    lab[..., 0] = 116.0 * f[..., 1] - 16.0
    lab[..., 1] = 500.0 * (f[..., 0] - f[..., 1])
    lab[..., 2] = 200.0 * (f[..., 1] - f[..., 2])
    return lab


def lab_to_srgb(lab):
    """(..., 3) Lab -> (..., 3) sRGB clamped to [0,1]."""
    lab = _check_channels(lab, "lab")
    fy = (lab[..., 0] + 16.0) / 116.0
    fx = fy + lab[..., 1] / 500.0
    fz = fy - lab[..., 2] / 200.0
    xyz = np.stack(
        [_f_inverse(fx), _f_inverse(fy), _f_inverse(fz)], axis=-1
    ) * _WHITE
    linear = xyz @ _XYZ_TO_RGB.T
    return np.clip(srgb_delinearize(linear), 0.0, 1.0)


def extract_ab_target(rgb):
    """(H, W, 3) sRGB -> (H, W, 2) chroma target scaled into (-1, 1).

    The luminance channel is dropped: the colorization pretext predicts only
    the two chromatic components from non-visible bands.
    """
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[-1] != 3:
        raise UsageError("extract_ab_target expects an (H, W, 3) image")
    lab = srgb_to_lab(rgb)
    return lab[..., 1:] / AB_SCALE


def lightness(rgb):
    """(..., 3) sRGB -> L channel in [0, 100]."""
    return srgb_to_lab(rgb)[..., 0]


def compose_preview(lightness_channel, ab_scaled):
    """Recombine an L channel with scaled (a, b) into an sRGB preview image.

    Used to visualize colorization predictions: ground-truth L plus the
    predicted chroma.  ``ab_scaled`` is (H, W, 2) in the (-1, 1) convention.
    """
    lightness_channel = np.asarray(lightness_channel, dtype=np.float64)
    ab_scaled = np.asarray(ab_scaled, dtype=np.float64)
    if ab_scaled.ndim != 3 or ab_scaled.shape[-1] != 2:
        raise UsageError("compose_preview expects an (H, W, 2) chroma map")
    if lightness_channel.shape != ab_scaled.shape[:-1]:
        raise UsageError("lightness and chroma extents differ")
    lab = np.concatenate(
        [lightness_channel[..., None], ab_scaled * AB_SCALE], axis=-1
    )
    return lab_to_srgb(lab)
