"""Class-activation maps: analytic identities, localization, and rendering."""

from pathlib import Path

import numpy as np
import pytest

from tilevote import colormap
from tilevote.datasets import SynthConfig, synth_image
from tilevote.errors import DataError, ShapeError
from tilevote.layers import EVAL
from tilevote.model import FINAL_CONV, ActivationTape, ModelConfig, TileNet
from tilevote.pngio import to_uint8
from tilevote.saliency import (
    OVERLAY_ALPHA,
    CamStats,
    cam_stats,
    grad_cam,
    normalize_map,
    render_overlay,
    save_cam_stats,
    save_overlay_png,
    score_cam,
)

DATA_DIR = Path(__file__).parent / "data"


def _single_channel_model():
    """Input 32 -> stem (averaging, stride 2) -> one identity-ish residual
    block -> (1, 16, 16) maps. Every parameter is set by hand, so forwards
    are deterministic functions of the input alone."""
    cfg = ModelConfig(input_size=32, stage_widths=(1,), blocks_per_stage=1)
    model = TileNet(cfg, seed=0)
    model.stem_conv.w[:] = 1.0 / 9.0                    # 3x3 box filter
    blk = model.blocks[0]
    for conv in (blk.conv1, blk.conv2):
        conv.w[:] = 0.0
        conv.w[0, 0, 1, 1] = 1.0                        # center tap
    model.fc_embed.w[:] = 1.0
    model.fc_embed.b[:] = 0.0
    model.fc_out.w[:] = 0.0
    model.fc_out.w[:, 0] = 1.0 / 128.0                  # positive head, class 0
    model.fc_out.b[:] = 0.0
    return model


def _planted_square_image(size=32, lo=10, hi=20):
    img = np.zeros((size, size), dtype=np.float32)
    img[lo:hi, lo:hi] = 1.0
    region = np.zeros((size, size), dtype=bool)
    region[lo:hi, lo:hi] = True
    return img, region


def _top_decile_iou(values, region):
    """IoU between the top-10%-by-rank pixels and a boolean region."""
    n = values.size
    k = max(1, int(round(0.1 * n)))
    thresh = np.partition(values.ravel(), n - k)[n - k]
    top = values >= thresh
    inter = np.logical_and(top, region).sum()
    union = np.logical_or(top, region).sum()
    return inter / union


def _golden_probe():
    """Fixed (model, image) pair behind the golden overlay file."""
    model = _single_channel_model()
    img = synth_image(SynthConfig(seed=123, images_per_class=1,
                                  image_size=(32, 32)), 3, 0).astype(np.float32)
    return model, img


def _write_golden(path):
    model, img = _golden_probe()
    sal = grad_cam(model.forward(img, EVAL), class_id=0)
    save_overlay_png(img, sal, path)


class TestNormalizeMap:
    def test_random_maps_hit_exact_bounds(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            m = rng.standard_normal((int(rng.integers(2, 9)), int(rng.integers(2, 9))))
            out = normalize_map(m)
            assert out.dtype == np.float32
            assert out.min() == 0.0 and out.max() == 1.0
            assert ((out >= 0) & (out <= 1)).all()

    def test_constant_map_becomes_zero(self):
        np.testing.assert_array_equal(normalize_map(np.full((4, 4), 7.3)), 0.0)
        np.testing.assert_array_equal(normalize_map(np.zeros((3, 5))), 0.0)

    def test_order_preserved(self):
        m = np.array([[1.0, 3.0], [2.0, 5.0]])
        out = normalize_map(m)
        assert out[0, 0] < out[1, 0] < out[0, 1] < out[1, 1]


class TestGradCam:
    def test_single_channel_unit_gradient_reduces_to_activation(self):
        """One feature channel with the head rigged so the activation
        gradient is exactly 1 everywhere: alpha = 1 and the map is the
        normalized channel itself."""
        model = _single_channel_model()
        u = v = 16
        model.fc_out.w[:, 0] = (u * v) / 128.0      # (W1 @ W2)[0, 0] = U*V
        img = np.random.default_rng(1).random((32, 32)).astype(np.float32)
        tape = model.forward(img, EVAL)
        from tilevote.model import grad_wrt_activation
        np.testing.assert_allclose(grad_wrt_activation(tape, 0), 1.0, rtol=1e-5)
        sal = grad_cam(tape, class_id=0)
        a = tape.activations[FINAL_CONV][0]
        np.testing.assert_allclose(sal.coarse, a, rtol=1e-5, atol=1e-7)
        from tilevote.tiling import resize_bilinear
        np.testing.assert_allclose(sal.values,
                                   normalize_map(resize_bilinear(sal.coarse, 32, 32)),
                                   atol=1e-6)

    def test_zero_weight_class_gives_zero_map(self):
        model = _single_channel_model()
        img = np.random.default_rng(2).random((32, 32)).astype(np.float32)
        sal = grad_cam(model.forward(img, EVAL), class_id=3)  # head col 3 is zero
        np.testing.assert_array_equal(sal.values, 0.0)
        np.testing.assert_array_equal(sal.coarse, 0.0)

    def test_two_channel_hand_computed_case(self):
        """Hand-set activations and head weights on a 2x2 spatial grid; the
        expected map is ReLU(a1*A1 + a2*A2) worked out by hand."""
        cfg = ModelConfig(input_size=16, stage_widths=(2,), blocks_per_stage=1)
        model = TileNet(cfg, seed=0)
        model.fc_embed.w[:] = 0.0
        model.fc_embed.w[0, 0] = 1.0
        model.fc_embed.w[1, 1] = 1.0
        model.fc_embed.b[:] = 0.0
        model.fc_out.w[:] = 0.0
        model.fc_out.w[0, 1] = 2.0      # (W1 @ W2)[:, 1] = (2, -1)
        model.fc_out.w[1, 1] = -1.0
        model.fc_out.b[:] = 0.0

        a = np.array([[[1.0, 0.0], [2.0, 4.0]],
                      [[3.0, 1.0], [0.0, 2.0]]], dtype=np.float32)
        # alpha = (W1 @ W2)[:, 1] / (U*V) = (0.5, -0.25)
        expect = np.maximum(0.5 * a[0] - 0.25 * a[1], 0.0)
        np.testing.assert_allclose(expect, [[0.0, 0.0], [1.0, 1.5]], atol=1e-12)

        caches = (None, (2, 2), np.zeros((1, 2)), np.zeros((1, 128)))
        tape = ActivationTape(logits=np.zeros(4, dtype=np.float32),
                              embedding=np.zeros(128, dtype=np.float32),
                              activations={FINAL_CONV: a}, mode=EVAL,
                              _caches=caches, _model=model)
        sal = grad_cam(tape, class_id=1)
        np.testing.assert_allclose(sal.coarse, expect, atol=1e-6)
        assert sal.values.shape == (16, 16)
        np.testing.assert_allclose(sal.values.max(), 1.0)

    def test_channel_weights_match_finite_differences(self):
        """alpha_k equals the FD derivative of the logit under a uniform
        shift of channel k, divided by the channel's pixel count."""
        cfg = ModelConfig(input_size=16, stage_widths=(3,), blocks_per_stage=1,
                          dtype="float64")
        model = TileNet(cfg, seed=4)
        img = np.random.default_rng(4).random((16, 16))
        tape = model.forward(img, EVAL)
        a = tape.activations[FINAL_CONV]
        k, u, v = a.shape
        cls = 2
        from tilevote.model import grad_wrt_activation
        alpha = grad_wrt_activation(tape, cls).mean(axis=(1, 2))

        def logit_of(acts):
            pooled = acts.mean(axis=(1, 2))
            emb = pooled @ model.fc_embed.w + model.fc_embed.b
            return (emb @ model.fc_out.w + model.fc_out.b)[cls]

        eps = 1e-3
        for c in range(k):
            shift = np.zeros_like(a)
            shift[c] = eps
            fd = (logit_of(a + shift) - logit_of(a - shift)) / (2 * eps) / (u * v)
            assert abs(alpha[c] - fd) <= 1e-3 * max(abs(fd), 1e-8)

    def test_default_class_is_argmax(self):
        model = _single_channel_model()
        img = np.random.default_rng(5).random((32, 32)).astype(np.float32)
        tape = model.forward(img, EVAL)
        sal = grad_cam(tape)
        assert sal.class_id == int(tape.logits.argmax())

    def test_out_of_range_class_rejected(self):
        model = _single_channel_model()
        tape = model.forward(np.zeros((32, 32), dtype=np.float32), EVAL)
        with pytest.raises(ValueError):
            grad_cam(tape, class_id=7)


class TestScoreCam:
    def test_single_channel_weight_is_one(self):
        """Softmax over one channel is 1 whatever the masked score, so the
        map again reduces to the normalized activation channel."""
        model = _single_channel_model()
        img = np.random.default_rng(6).random((32, 32)).astype(np.float32)
        sal = score_cam(model, img, class_id=0)
        tape = model.forward(img, EVAL)
        a = tape.activations[FINAL_CONV][0]
        np.testing.assert_allclose(sal.coarse, a, rtol=1e-5, atol=1e-7)

    def test_constant_head_gives_equal_channel_weights(self):
        """With the class head zeroed out, every masked forward produces the
        same logit, so both channels get softmax weight 0.5."""
        cfg = ModelConfig(input_size=16, stage_widths=(2,), blocks_per_stage=1)
        model = TileNet(cfg, seed=7)
        model.fc_out.w[:] = 0.0
        model.fc_out.b[:] = 0.3
        img = np.random.default_rng(7).random((16, 16)).astype(np.float32)
        sal = score_cam(model, img, class_id=1)
        a = model.forward(img, EVAL).activations[FINAL_CONV]
        expect = np.maximum(0.5 * a[0] + 0.5 * a[1], 0.0)
        np.testing.assert_allclose(sal.coarse, expect, rtol=1e-5, atol=1e-7)

    def test_baseline_and_shape_validation(self):
        model = _single_channel_model()
        img = np.zeros((32, 32), dtype=np.float32)
        with pytest.raises(DataError):
            score_cam(model, img, baseline="mean")
        with pytest.raises(ShapeError):
            score_cam(model, np.zeros((16, 16), dtype=np.float32))

    def test_none_baseline_accepted(self):
        model = _single_channel_model()
        img = np.random.default_rng(8).random((32, 32)).astype(np.float32)
        sal = score_cam(model, img, class_id=0, baseline="none")
        assert sal.values.shape == (32, 32)


class TestPlantedSignalLocalization:
    def test_both_methods_concentrate_on_the_square(self):
        """A bright square on a dark field is the only signal; the top decile
        of both maps must overlap it with IoU above 0.5."""
        model = _single_channel_model()
        img, region = _planted_square_image()
        tape = model.forward(img, EVAL)
        for sal in (grad_cam(tape, class_id=0),
                    score_cam(model, img, class_id=0)):
            iou = _top_decile_iou(sal.values, region)
            assert iou > 0.5, (sal.method, iou)
            r, c = np.unravel_index(int(sal.values.argmax()), sal.values.shape)
            assert region[r, c], (sal.method, r, c)


class TestOverlay:
    def test_zero_map_blends_toward_colormap_floor(self):
        model = _single_channel_model()
        img = np.full((32, 32), 0.5, dtype=np.float32)
        sal = grad_cam(model.forward(img, EVAL), class_id=3)   # all-zero map
        out = render_overlay(img, sal)
        low = colormap.TABLE[0].astype(np.float64) / 255.0
        expect = to_uint8((1 - OVERLAY_ALPHA) * 0.5 + OVERLAY_ALPHA * low
                          * np.ones((32, 32, 3)))
        np.testing.assert_array_equal(out, expect)

    def test_unit_map_blends_toward_colormap_ceiling(self):
        from tilevote.saliency import SaliencyMap
        sal = SaliencyMap(method="grad_cam", class_id=0,
                          values=np.ones((8, 8), dtype=np.float32),
                          coarse=np.ones((4, 4), dtype=np.float32))
        gray = np.full((8, 8), 0.25)
        out = render_overlay(gray, sal)
        hi = colormap.TABLE[255].astype(np.float64) / 255.0
        expect = to_uint8((1 - OVERLAY_ALPHA) * 0.25 + OVERLAY_ALPHA * hi
                          * np.ones((8, 8, 3)))
        np.testing.assert_array_equal(out, expect)

    def test_shape_and_alpha_validation(self):
        from tilevote.saliency import SaliencyMap
        sal = SaliencyMap("grad_cam", 0, np.ones((8, 8), dtype=np.float32),
                          np.ones((4, 4), dtype=np.float32))
        with pytest.raises(ShapeError):
            render_overlay(np.zeros((9, 9)), sal)
        with pytest.raises(DataError):
            render_overlay(np.zeros((8, 8)), sal, alpha=1.5)

    def test_golden_overlay_bytes_stable(self, tmp_path):
        """The fixed probe renders byte-identically to the committed file."""
        golden = DATA_DIR / "overlay_golden.png"
        assert golden.is_file(), "golden overlay missing; see _write_golden"
        out = tmp_path / "overlay.png"
        _write_golden(out)
        assert out.read_bytes() == golden.read_bytes()
        out2 = tmp_path / "overlay2.png"
        _write_golden(out2)
        assert out2.read_bytes() == out.read_bytes()


class TestCamStats:
    def test_peak_and_area(self):
        from tilevote.saliency import SaliencyMap
        values = np.array([[1.0, 1.0], [0.2, 0.95]], dtype=np.float32)
        sal = SaliencyMap("grad_cam", 2, values, values)
        st = cam_stats("tile_a", sal)
        assert (st.max_row, st.max_col) == (0, 0)   # first peak wins
        np.testing.assert_allclose(st.top_decile_fraction, 0.75)
        assert st.method == "grad_cam" and st.class_id == 2

    def test_csv_format(self, tmp_path):
        rows = [CamStats("t0", "grad_cam", 1, 3, 4, 0.125),
                CamStats("t1", "score_cam", 0, 0, 0, 1.0)]
        save_cam_stats(rows, tmp_path / "stats.csv")
        lines = (tmp_path / "stats.csv").read_text().strip().splitlines()
        assert lines[0] == "tile_id,method,class,max_row,max_col,top_decile_fraction"
        assert lines[1].startswith("t0,grad_cam,1,3,4,0.125")
