"""Volume compounding and coronal projection: equivalences and fast path."""

import numpy as np
import pytest

from scoliosim.bmode import BModeFrame, ImagingConfig, ProbePose, ScanRecording
from scoliosim.controller import ScanConfig, run_scan
from scoliosim.recon import (
    ReconError,
    compound,
    load_coronal,
    recording_hash,
    save_coronal,
    vpi_direct,
    vpi_direct_multi,
    vpi_volume,
)
from scoliosim.phantom import PhantomConfig, build_phantom


class FlatSkin:
    """Minimal skin model: flat surface at y = 0."""

    def __init__(self, spine_length=400.0):
        self.config = type("C", (), {"spine_length": spine_length})()

    def skin_height(self, z, x):
        return np.zeros(np.broadcast_shapes(np.shape(z), np.shape(x)))


def _synthetic_recording(n_frames=20, value=1.0, cfg=None, y0=0.0):
    """Axis-aligned frames of constant intensity marching along z."""
    cfg = cfg or ImagingConfig(width_px=40, height_px=30, probe_width=40.0,
                               depth=30.0, speckle_sigma=0.0)
    frames = []
    for i in range(n_frames):
        pose = ProbePose(position=np.array([0.0, y0, 100.0 + 2.0 * i]),
                         timestamp=i * 0.1)
        pixels = np.full((cfg.height_px, cfg.width_px), value, dtype=np.float32)
        frames.append(BModeFrame(pixels=pixels, pose=pose, contact_fraction=1.0))
    return ScanRecording(frames=frames, config=cfg)


@pytest.fixture(scope="module")
def nominal_recording(fast_imaging=None):
    ph = build_phantom(PhantomConfig())
    img = ImagingConfig(width_px=160, height_px=96, frame_rate=4.0,
                        speckle_sigma=0.2, seed=4)
    rec = run_scan(ph, ScanConfig(mode="manual", control_rate=15.0), img)
    return ph, rec


def test_compound_single_frame():
    rec = _synthetic_recording(n_frames=2)
    vol = compound(rec, spacing=1.0)
    assert vol.hit_counts.sum() > 0
    filled = vol.voxels[vol.hit_counts > 0]
    assert np.allclose(filled, 1.0)


def test_compound_all_white_means_one():
    vol = compound(_synthetic_recording(value=1.0), spacing=1.0)
    assert np.allclose(vol.voxels[vol.hit_counts > 0], 1.0)


def test_compound_translation_equivariance():
    rec_a = _synthetic_recording()
    rec_b = _synthetic_recording()
    for fr in rec_b.frames:
        fr.pose.position[2] += 10.0
    va = compound(rec_a, spacing=1.0)
    vb = compound(rec_b, spacing=1.0)
    assert np.array_equal(va.voxels, vb.voxels)
    assert vb.origin[2] - va.origin[2] == pytest.approx(10.0)


def test_compound_errors():
    with pytest.raises(ReconError):
        compound(ScanRecording(frames=[], config=ImagingConfig()))


def test_vpi_uniform_volume_gives_uniform_image():
    rec = _synthetic_recording(value=0.5)
    skin = FlatSkin()
    vol = compound(rec, spacing=1.0)
    img = vpi_volume(vol, skin, depth=5.0, band=3.0)
    assert np.allclose(img.pixels[img.counts > 0], 0.5)
    direct = vpi_direct(rec, skin, depth=5.0, band=3.0, spacing=1.0)
    assert np.allclose(direct.pixels[direct.counts > 0], 0.5)


def test_vpi_intensity_linearity():
    skin = FlatSkin()
    rec1 = _synthetic_recording(value=0.4)
    rec2 = _synthetic_recording(value=0.8)
    d1 = vpi_direct(rec1, skin, 5.0, band=3.0, spacing=1.0)
    d2 = vpi_direct(rec2, skin, 5.0, band=3.0, spacing=1.0)
    assert np.allclose(d2.pixels, 2.0 * d1.pixels)
    v1 = vpi_volume(compound(rec1, 1.0), skin, 5.0, band=3.0)
    v2 = vpi_volume(compound(rec2, 1.0), skin, 5.0, band=3.0)
    assert np.allclose(v2.pixels, 2.0 * v1.pixels)


def test_vpi_direct_translation_equivariance():
    skin = FlatSkin(spine_length=1000.0)
    rec_a = _synthetic_recording(value=0.6)
    rec_b = _synthetic_recording(value=0.6)
    for fr in rec_b.frames:
        fr.pose.position[2] += 50.0
    a = vpi_direct(rec_a, skin, 5.0, band=3.0, spacing=1.0)
    b = vpi_direct(rec_b, skin, 5.0, band=3.0, spacing=1.0)
    assert np.array_equal(a.pixels, b.pixels)
    assert b.origin_zx[0] - a.origin_zx[0] == pytest.approx(50.0)


def test_vpi_direct_multi_matches_single_depth_calls(nominal_recording):
    ph, rec = nominal_recording
    depths = [4.0, 7.0, 10.0]   # contiguous tiling: exercises the fast path
    multi = vpi_direct_multi(rec, ph, depths, band=3.0, spacing=1.0)
    for d, img in zip(depths, multi):
        single = vpi_direct(rec, ph, d, band=3.0, spacing=1.0)
        assert np.allclose(single.pixels, img.pixels, atol=1e-9)
        assert np.array_equal(single.counts, img.counts)


def test_vpi_tiled_equals_untiled(nominal_recording):
    ph, rec = nominal_recording
    tiled = vpi_direct_multi(rec, ph, [4.0, 7.0, 10.0], band=3.0, spacing=1.0)
    # non-uniform spacing forces the per-depth (untiled) accumulation
    untiled = vpi_direct_multi(rec, ph, [4.0, 7.0, 10.0, 20.0], band=3.0,
                               spacing=1.0)[:3]
    for a, b in zip(tiled, untiled):
        assert np.allclose(a.pixels, b.pixels, atol=1e-9)
        assert np.array_equal(a.counts, b.counts)


def test_cross_path_agreement(nominal_recording):
    ph, rec = nominal_recording
    direct = vpi_direct(rec, ph, 10.0, band=3.0, spacing=1.0)
    vol = compound(rec, spacing=1.0)
    volume = vpi_volume(vol, ph, 10.0, band=3.0)
    nz = min(direct.pixels.shape[0], volume.pixels.shape[0])
    nx = min(direct.pixels.shape[1], volume.pixels.shape[1])
    both = (direct.counts[:nz, :nx] > 0) & (volume.counts[:nz, :nx] > 0)
    assert both.sum() > 1000
    mad = float(np.abs(direct.pixels[:nz, :nx] - volume.pixels[:nz, :nx])[both].mean())
    assert mad < 0.05


def test_vpi_determinism(nominal_recording):
    ph, rec = nominal_recording
    a = vpi_direct(rec, ph, 10.0, band=3.0, spacing=1.0)
    b = vpi_direct(rec, ph, 10.0, band=3.0, spacing=1.0)
    assert np.array_equal(a.pixels, b.pixels)


def test_vpi_errors():
    skin = FlatSkin()
    with pytest.raises(ReconError):
        vpi_direct(ScanRecording(frames=[], config=ImagingConfig()), skin, 5.0)
    rec = _synthetic_recording()
    with pytest.raises(ReconError):
        # the band lies entirely below the imaged depth range
        vpi_direct(rec, skin, 500.0, band=3.0, spacing=1.0)


def test_coronal_save_load_round_trip(tmp_path, nominal_recording):
    ph, rec = nominal_recording
    img = vpi_direct(rec, ph, 10.0, band=3.0, spacing=1.0)
    img.slice_index = 3
    save_coronal(img, tmp_path / "c.pgm", source_hash=recording_hash(rec))
    back = load_coronal(tmp_path / "c.pgm")
    assert back.depth == img.depth
    assert back.band == img.band
    assert back.spacing == img.spacing
    assert back.slice_index == 3
    assert back.origin_zx == img.origin_zx
    assert np.max(np.abs(back.pixels - np.clip(img.pixels, 0, 1))) <= 1.0 / 255.0


def test_recording_hash_sensitivity(nominal_recording):
    ph, rec = nominal_recording
    h1 = recording_hash(rec)
    rec.frames[0].pixels[0, 0] += 0.01
    h2 = recording_hash(rec)
    rec.frames[0].pixels[0, 0] -= 0.01
    assert h1 != h2
    assert recording_hash(rec) == h1
