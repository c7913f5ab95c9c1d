import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from PIL import Image as PILImage

from occdis.errors import ContractError, ImageFormatError, ParameterRangeError
from occdis.imagecore import (
    bilinear_sample,
    blur_radius,
    gaussian_psf_blur,
    identity_coords,
    image_io,
    read_png,
    write_png,
)


def ramp(h=16, w=16, axis=1, dtype=torch.float64):
    v, u = torch.meshgrid(torch.arange(h, dtype=dtype), torch.arange(w, dtype=dtype), indexing="ij")
    r = u if axis == 1 else v
    return (r / (max(h, w) - 1)).expand(3, h, w).clone()


class TestBilinearSample:
    def test_identity_is_exact(self):
        img = torch.rand(3, 12, 17, dtype=torch.float64)
        out = bilinear_sample(img, identity_coords(12, 17, torch.float64))
        assert torch.equal(out, img)

    def test_shift_one_column_clamps_border(self):
        img = ramp(10, 12)
        coords = identity_coords(10, 12, torch.float64)
        coords[..., 0] += 1.0
        out = bilinear_sample(img, coords)
        expected = torch.cat([img[..., 1:], img[..., -1:]], dim=-1)  # index arithmetic oracle
        assert torch.allclose(out, expected, atol=1e-12)

    def test_half_pixel_on_2x2(self):
        img = torch.tensor([[[0.0, 1.0], [0.0, 1.0]]], dtype=torch.float64)
        coords = torch.tensor([[[0.5, 0.5]]], dtype=torch.float64)
        # closed form: (1-a)(1-b)*0 + a(1-b)*1 + (1-a)b*0 + ab*1 with a=b=0.5
        assert bilinear_sample(img, coords).item() == pytest.approx(0.5, abs=1e-15)

    def test_affine_image_exact_in_interior(self):
        h, w = 20, 24
        v, u = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64), indexing="ij")
        img = (0.3 + 0.01 * u - 0.02 * v).unsqueeze(0)
        g = torch.Generator().manual_seed(1)
        cu = 1 + (w - 3) * torch.rand(7, 9, generator=g, dtype=torch.float64)
        cv = 1 + (h - 3) * torch.rand(7, 9, generator=g, dtype=torch.float64)
        out = bilinear_sample(img, torch.stack([cu, cv], -1))
        assert torch.allclose(out[0], 0.3 + 0.01 * cu - 0.02 * cv, atol=1e-12)

    def test_mismatched_batch_rejected(self):
        with pytest.raises(ContractError):
            bilinear_sample(torch.rand(2, 3, 8, 8), torch.zeros(3, 8, 8, 2))

    def test_gradients_reach_image_and_coords(self):
        img = torch.rand(1, 3, 9, 9, dtype=torch.float64, requires_grad=True)
        coords = (identity_coords(9, 9, torch.float64) + 0.37).unsqueeze(0).requires_grad_(True)
        assert torch.autograd.gradcheck(lambda i, c: bilinear_sample(i, c), (img, coords))

    def test_pure(self):
        img = torch.rand(3, 8, 8)
        coords = identity_coords(8, 8) * 0.9 + 0.2
        assert torch.equal(bilinear_sample(img, coords), bilinear_sample(img, coords))


def dense_gaussian_oracle(h, w, cv, cu, sigma, radius):
    """2-D Gaussian evaluated directly on the window, renormalised over the window."""
    out = np.zeros((h, w))
    t = np.arange(-radius, radius + 1)
    g = np.exp(-(t[:, None] ** 2 + t[None, :] ** 2) / (2 * sigma**2))
    g /= g.sum()
    out[cv - radius : cv + radius + 1, cu - radius : cu + radius + 1] = g
    return out


class TestGaussianBlur:
    def test_tiny_sigma_is_identity(self):
        img = torch.rand(3, 16, 16, dtype=torch.float64)
        out = gaussian_psf_blur(img, 1e-3, sigma_max=4.0)
        assert (out - img).abs().max() < 1e-4

    @pytest.mark.parametrize("sigma", [0.5, 2.0, 7.5])
    def test_constant_preserved(self, sigma):
        img = torch.full((3, 20, 24), 0.37, dtype=torch.float64)
        assert torch.allclose(gaussian_psf_blur(img, sigma, 8.0), img, atol=1e-12)

    def test_impulse_matches_dense_kernel(self):
        h = w = 41
        sigma, sigma_max = 2.0, 3.0
        radius = blur_radius(sigma_max)
        img = torch.zeros(1, h, w, dtype=torch.float64)
        img[0, 20, 20] = 1.0
        out = gaussian_psf_blur(img, sigma, sigma_max)[0].numpy()
        expected = dense_gaussian_oracle(h, w, 20, 20, sigma, radius)
        assert np.abs(out - expected).max() < 1e-6

    @pytest.mark.parametrize("bad", [0.0, -1.0, 9.0])
    def test_sigma_range(self, bad):
        with pytest.raises(ParameterRangeError):
            gaussian_psf_blur(torch.rand(1, 8, 8), bad, 8.0)

    def test_window_larger_than_image(self):
        # reflective borders must still work when the window exceeds the extent
        img = torch.rand(3, 16, 16, dtype=torch.float64)
        out = gaussian_psf_blur(img, 20.0, 25.0)
        assert torch.isfinite(out).all()
        assert out.mean().item() == pytest.approx(img.mean().item(), abs=0.05)

    def test_sigma_gradient_matches_central_differences(self):
        g = torch.Generator().manual_seed(3)
        img = torch.rand(3, 32, 32, generator=g, dtype=torch.float64)
        w = torch.rand(3, 32, 32, generator=g, dtype=torch.float64)
        for s0 in (0.8, 2.0, 4.0):
            sigma = torch.tensor(s0, dtype=torch.float64, requires_grad=True)
            (gaussian_psf_blur(img, sigma, 6.0) * w).sum().backward()
            h = 1e-3
            fd = ((gaussian_psf_blur(img, s0 + h, 6.0) * w).sum() - (gaussian_psf_blur(img, s0 - h, 6.0) * w).sum()) / (2 * h)
            assert abs(sigma.grad.item() - fd.item()) / abs(fd.item()) < 1e-3

    @settings(max_examples=25, deadline=None)
    @given(sigma=st.floats(0.1, 5.0), seed=st.integers(0, 1000))
    def test_mean_bounds(self, sigma, seed):
        img = torch.rand(3, 12, 12, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
        out = gaussian_psf_blur(img, sigma, 5.0)
        assert out.min() >= img.min() - 1e-12 and out.max() <= img.max() + 1e-12


class TestPngIO:
    def test_round_trip_quantisation_bound(self, tmp_path):
        img = torch.rand(3, 17, 23, generator=torch.Generator().manual_seed(0))
        write_png(tmp_path / "a.png", img)
        back = read_png(tmp_path / "a.png")
        assert back.shape == img.shape
        assert (back - img).abs().max().item() <= 1 / 510 + 1e-7

    def test_channels(self, tmp_path):
        write_png(tmp_path / "rgb.png", torch.rand(3, 9, 9))
        write_png(tmp_path / "g.png", torch.rand(1, 9, 9))
        assert read_png(tmp_path / "rgb.png").shape[0] == 3
        assert read_png(tmp_path / "g.png").shape[0] == 1

    def test_sixteen_bit_rejected(self, tmp_path):
        arr = (np.arange(100, dtype=np.uint16).reshape(10, 10) * 600).astype(np.uint16)
        PILImage.fromarray(arr).save(tmp_path / "deep.png")
        with pytest.raises(ImageFormatError):
            read_png(tmp_path / "deep.png")

    def test_missing_and_malformed(self, tmp_path):
        with pytest.raises(FileNotFoundError, match="nope.png"):
            read_png(tmp_path / "nope.png")
        (tmp_path / "junk.png").write_bytes(b"not a png at all")
        with pytest.raises(ImageFormatError, match="junk.png"):
            read_png(tmp_path / "junk.png")

    def test_unwritable(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            write_png(tmp_path / "missing" / "x.png", torch.rand(3, 8, 8))

    def test_dispatch(self, tmp_path):
        img = torch.rand(3, 8, 8)
        image_io(tmp_path / "d.png", "write", img)
        assert image_io(tmp_path / "d.png").shape == (3, 8, 8)
