import math

import numpy as np
import pytest

from framecache import (FeatureMap, Frame, LayerGeom, LayerSpec, LayerType,
                        MatcherConfig, Rect, RegionMapping, Session,
                        build_reuse_bitmap, concat_forward, conv_forward,
                        conv_forward_cached, elementwise_forward, fc_forward,
                        load_weights, lrn_forward, parse_model, pool_forward,
                        preprocess, random_weights, relu_forward, run_frame,
                        softmax_forward, synth_sequence)

import reference


def fmap(arr) -> FeatureMap:
    return FeatureMap(np.asarray(arr, dtype=np.float32))


def rand_map(seed, c, h, w, lo=-2.0, hi=2.0) -> FeatureMap:
    rng = np.random.default_rng(seed)
    return fmap(rng.uniform(lo, hi, size=(c, h, w)))


def conv_spec(k, out_ch, s=1, p=0, *, in_ch, seed=0, name="c") -> LayerSpec:
    rng = np.random.default_rng(seed)
    spec = LayerSpec(name, "conv",
                     LayerGeom(LayerType.CONVOLUTION, kernel=k, stride=s, pad=p),
                     ["data"], "out", out_channels=out_ch)
    spec.weights = rng.normal(size=(out_ch, in_ch, k, k)).astype(np.float32)
    spec.biases = rng.normal(size=out_ch).astype(np.float32)
    return spec


class TestPreprocess:
    def test_identity(self):
        f = Frame(np.arange(12, dtype=np.uint8).reshape(1, 3, 4))
        out = preprocess(f)
        assert out.data.dtype == np.float32
        assert np.array_equal(out.data, f.data.astype(np.float32))

    def test_scalar_mean_scale(self):
        f = Frame(np.full((1, 2, 2), 255, dtype=np.uint8))
        out = preprocess(f, mean=104.0, scale=0.017)
        assert out.data[0, 0, 0] == np.float32((255.0 - 104.0) * 0.017)
        assert abs(out.data[0, 0, 0] - 2.567) < 1e-3

    def test_per_channel_mean(self):
        f = Frame(np.full((3, 2, 2), 100, dtype=np.uint8))
        out = preprocess(f, mean=[10.0, 20.0, 30.0])
        assert np.allclose(out.data[0], 90.0)
        assert np.allclose(out.data[1], 80.0)
        assert np.allclose(out.data[2], 70.0)

    def test_centered_range(self):
        f = Frame(np.array([[[0, 255]]], dtype=np.uint8))
        out = preprocess(f, mean=127.5, scale=1.0 / 127.5)
        assert out.data[0, 0, 0] == np.float32(-1.0)
        assert out.data[0, 0, 1] == np.float32(1.0)


class TestConvForward:
    @pytest.mark.parametrize("c,h,w,k,out_ch,s,p", [
        (1, 5, 5, 3, 1, 1, 0),
        (3, 8, 7, 3, 4, 1, 1),
        (2, 9, 9, 5, 3, 2, 2),
        (4, 6, 10, 1, 2, 1, 0),
        (1, 7, 7, 3, 2, 3, 0),
        (2, 11, 8, 4, 3, 2, 1),
    ])
    def test_matches_naive_bitwise(self, c, h, w, k, out_ch, s, p):
        x = rand_map(hash((c, h, w, k)) % 2**32, c, h, w)
        spec = conv_spec(k, out_ch, s, p, in_ch=c, seed=k + s)
        got = conv_forward(x, spec)
        want = reference.conv_naive(x.data, spec.weights, spec.biases, s, p)
        assert got.data.shape == want.shape
        assert np.array_equal(got.data, want)

    def test_one_by_one_doubles(self):
        x = rand_map(7, 2, 4, 4)
        spec = conv_spec(1, 2, in_ch=2)
        spec.weights = np.zeros((2, 2, 1, 1), dtype=np.float32)
        spec.weights[0, 0] = 2.0
        spec.weights[1, 1] = 2.0
        spec.biases = np.zeros(2, dtype=np.float32)
        out = conv_forward(x, spec)
        assert np.array_equal(out.data, x.data * 2.0)

    def test_identity_kernel(self):
        x = rand_map(8, 1, 6, 6)
        spec = conv_spec(3, 1, 1, 1, in_ch=1)
        spec.weights = np.zeros((1, 1, 3, 3), dtype=np.float32)
        spec.weights[0, 0, 1, 1] = 1.0
        spec.biases = np.zeros(1, dtype=np.float32)
        out = conv_forward(x, spec)
        assert np.array_equal(out.data, x.data)

    def test_bias_only(self):
        x = rand_map(9, 1, 4, 4)
        spec = conv_spec(3, 2, in_ch=1)
        spec.weights = np.zeros((2, 1, 3, 3), dtype=np.float32)
        spec.biases = np.array([1.5, -0.25], dtype=np.float32)
        out = conv_forward(x, spec)
        assert np.all(out.data[0] == np.float32(1.5))
        assert np.all(out.data[1] == np.float32(-0.25))

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            conv_forward(rand_map(0, 3, 5, 5), conv_spec(3, 1, in_ch=2))


class TestPoolForward:
    def pool_spec(self, k, s=1, p=0, mode="max"):
        return LayerSpec("p", "pool",
                         LayerGeom(LayerType.POOLING, kernel=k, stride=s, pad=p),
                         ["data"], "out", pool_mode=mode)

    def test_max_2x2(self):
        x = fmap(np.arange(16).reshape(1, 4, 4))
        out = pool_forward(x, self.pool_spec(2, 2))
        assert np.array_equal(out.data[0], [[5, 7], [13, 15]])

    def test_max_padding_never_wins(self):
        x = fmap(np.full((1, 2, 2), -3.0))
        out = pool_forward(x, self.pool_spec(3, 1, 1))
        assert np.all(out.data == np.float32(-3.0))

    def test_avg_zero_pad(self):
        x = fmap(np.full((1, 2, 2), 4.0))
        out = pool_forward(x, self.pool_spec(2, 1, 1, "avg"))
        # corner windows hold one real value and three zeros
        assert out.data[0, 0, 0] == np.float32(1.0)
        assert out.data[0, 1, 1] == np.float32(4.0)

    @pytest.mark.parametrize("mode", ["max", "avg"])
    @pytest.mark.parametrize("k,s,p", [(2, 2, 0), (3, 1, 1), (3, 2, 1), (4, 3, 0)])
    def test_matches_naive(self, mode, k, s, p):
        x = rand_map(k * 10 + s, 3, 9, 8)
        got = pool_forward(x, self.pool_spec(k, s, p, mode))
        want = reference.pool_naive(x.data, k, s, p, mode)
        assert np.array_equal(got.data, want)


class TestLrnForward:
    def lrn_spec(self, r, alpha=1e-4, beta=0.75, bias=1.0):
        return LayerSpec("n", "lrn", LayerGeom(LayerType.LRN, radius=r),
                         ["data"], "out", alpha=alpha, beta=beta, norm_bias=bias)

    @pytest.mark.parametrize("c,r", [(1, 0), (3, 1), (5, 2), (4, 5)])
    def test_matches_naive(self, c, r):
        x = rand_map(c * 7 + r, c, 6, 5)
        got = lrn_forward(x, self.lrn_spec(r))
        want = reference.lrn_naive(x.data, r, 1e-4, 0.75, 1.0)
        assert np.array_equal(got.data, want)

    def test_window_is_cross_channel(self):
        # radius 1, three channels: middle channel sees all three squares
        x = fmap(np.ones((3, 1, 1)))
        out = lrn_forward(x, self.lrn_spec(1, alpha=3.0, beta=1.0, bias=1.0))
        # size = 3, middle sum = 3 -> denom = 1 + (3/3)*3 = 4
        assert abs(out.data[1, 0, 0] - 0.25) < 1e-6
        # edge channels see two squares -> denom = 1 + (3/3)*2 = 3
        assert abs(out.data[0, 0, 0] - 1.0 / 3.0) < 1e-6


class TestFcForward:
    def fc_spec(self, out_features, in_features, seed=0):
        rng = np.random.default_rng(seed)
        spec = LayerSpec("f", "fc", LayerGeom(LayerType.FULLY_CONNECTED),
                         ["data"], "out", out_features=out_features)
        spec.weights = rng.normal(size=(out_features, in_features)).astype(np.float32)
        spec.biases = rng.normal(size=out_features).astype(np.float32)
        return spec

    def test_matches_exact_rational(self):
        x = rand_map(3, 2, 3, 4)
        spec = self.fc_spec(5, 24)
        got = fc_forward(x, spec)
        assert got.data.shape == (5, 1, 1)
        want = reference.fc_exact(x.data, spec.weights, spec.biases)
        assert np.array_equal(got.data, want)

    def test_flatten_order_is_channel_row_col(self):
        x = fmap(np.arange(8).reshape(2, 2, 2))
        spec = self.fc_spec(1, 8)
        spec.weights = np.zeros((1, 8), dtype=np.float32)
        spec.weights[0, 5] = 1.0  # channel 1, row 0, col 1 -> value 5
        spec.biases = np.zeros(1, dtype=np.float32)
        assert fc_forward(x, spec).data[0, 0, 0] == np.float32(5.0)

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            fc_forward(rand_map(0, 2, 3, 3), self.fc_spec(4, 10))


class TestSoftmax:
    def test_uniform(self):
        out = softmax_forward(fmap(np.zeros((4, 1, 1))))
        assert np.allclose(out.data, 0.25)
        assert abs(float(out.data.sum()) - 1.0) < 1e-6

    def test_matches_naive_bitwise(self):
        x = rand_map(11, 7, 1, 1, lo=-5.0, hi=5.0)
        got = softmax_forward(x)
        want = reference.softmax_naive(x.data)
        assert np.array_equal(got.data, want)

    def test_spatial_positions_independent(self):
        x = rand_map(12, 3, 2, 2)
        out = softmax_forward(x)
        sums = out.data.sum(axis=0)
        assert np.allclose(sums, 1.0, atol=1e-6)

    def test_large_inputs_finite(self):
        out = softmax_forward(fmap([[[900.0]], [[-900.0]]]))
        assert np.all(np.isfinite(out.data))
        assert abs(float(out.data.sum()) - 1.0) < 1e-6


class TestConcatElementwise:
    def test_concat_stacks_channels(self):
        a = rand_map(1, 2, 3, 3)
        b = rand_map(2, 1, 3, 3)
        out = concat_forward([a, b])
        assert out.data.shape == (3, 3, 3)
        assert np.array_equal(out.data[:2], a.data)
        assert np.array_equal(out.data[2:], b.data)

    def test_concat_spatial_mismatch(self):
        with pytest.raises(ValueError):
            concat_forward([rand_map(1, 1, 3, 3), rand_map(2, 1, 4, 3)])

    def test_relu(self):
        out = relu_forward(fmap([[[-1.0, 0.0], [2.5, 3.0]]]))
        assert np.array_equal(out.data, [[[0.0, 0.0], [2.5, 3.0]]])

    def test_scale(self):
        spec = LayerSpec("s", "scale", LayerGeom(LayerType.ELEMENTWISE),
                         ["data"], "out", factor=0.5)
        out = elementwise_forward(fmap([[[3.0, -4.0]]]), spec)
        assert np.array_equal(out.data, [[[1.5, -2.0]]])

    def test_bias(self):
        spec = LayerSpec("b", "bias", LayerGeom(LayerType.ELEMENTWISE),
                         ["data"], "out", value=-1.0)
        out = elementwise_forward(fmap([[[3.0, 0.25]]]), spec)
        assert np.array_equal(out.data, [[[2.0, -0.75]]])


class TestReuseBitmap:
    def test_empty(self):
        bm = build_reuse_bitmap([], 6, 4)
        assert bm.shape == (4, 6)
        assert not bm.any()

    def test_counts(self):
        ms = [RegionMapping(dst=Rect(0, 0, 4, 3), src=Rect(1, 1, 4, 3)),
              RegionMapping(dst=Rect(0, 3, 5, 4), src=Rect(0, 0, 5, 4))]
        bm = build_reuse_bitmap(ms, 8, 8)
        assert int(bm.sum()) == 12 + 20
        assert bm[0, 0] and bm[3, 4] and not bm[0, 4]

    def test_full_cover(self):
        bm = build_reuse_bitmap([RegionMapping(dst=Rect(0, 0, 5, 5),
                                               src=Rect(0, 0, 5, 5))], 5, 5)
        assert bm.all()

    def test_overlap_rejected(self):
        ms = [RegionMapping(dst=Rect(0, 0, 4, 4), src=Rect(0, 0, 4, 4)),
              RegionMapping(dst=Rect(3, 3, 4, 4), src=Rect(0, 0, 4, 4))]
        with pytest.raises(RuntimeError):
            build_reuse_bitmap(ms, 8, 8)

    def test_out_of_bounds_rejected(self):
        with pytest.raises(RuntimeError):
            build_reuse_bitmap([RegionMapping(dst=Rect(5, 0, 4, 4),
                                              src=Rect(0, 0, 4, 4))], 8, 8)


class TestConvForwardCached:
    def setup_case(self, seed=0):
        x = rand_map(seed, 3, 12, 12)
        spec = conv_spec(3, 4, 1, 1, in_ch=3, seed=seed + 1)
        full = conv_forward(x, spec)
        return x, spec, full

    def test_no_mappings_full_compute(self):
        x, spec, full = self.setup_case()
        out, computed, copied = conv_forward_cached(x, spec, full, [])
        assert np.array_equal(out.data, full.data)
        assert copied == 0
        assert computed == 12 * 12 * 4 * 3 * 9

    def test_full_cover_zero_compute(self):
        x, spec, full = self.setup_case(1)
        m = [RegionMapping(dst=Rect(0, 0, 12, 12), src=Rect(0, 0, 12, 12))]
        out, computed, copied = conv_forward_cached(x, spec, full, m)
        assert np.array_equal(out.data, full.data)
        assert computed == 0
        assert copied == 12 * 12 * 4

    def test_partial_copy_and_compute(self):
        x, spec, full = self.setup_case(2)
        stale = FeatureMap((full.data * 3.0 + 1.0).astype(np.float32))
        m = [RegionMapping(dst=Rect(2, 3, 5, 4), src=Rect(1, 1, 5, 4))]
        out, computed, copied = conv_forward_cached(x, spec, stale, m)
        assert copied == 5 * 4 * 4
        assert computed == (12 * 12 - 20) * 4 * 3 * 9
        # copied pixels come verbatim from the cache at the source offset
        assert np.array_equal(out.data[:, 3:7, 2:7], stale.data[:, 1:5, 1:6])
        # computed pixels are bit-identical to the plain convolution
        fresh = ~build_reuse_bitmap(m, 12, 12)
        assert np.array_equal(out.data[:, fresh], full.data[:, fresh])

    def test_mac_identity(self):
        x, spec, full = self.setup_case(3)
        ms = [RegionMapping(dst=Rect(0, 0, 6, 6), src=Rect(0, 0, 6, 6)),
              RegionMapping(dst=Rect(6, 6, 4, 4), src=Rect(2, 2, 4, 4))]
        _, computed, copied = conv_forward_cached(x, spec, full, ms)
        k, in_ch = spec.geom.kernel, 3
        total = 12 * 12 * 4 * in_ch * k * k
        assert computed + copied * in_ch * k * k == total

    def test_strided_case_matches_full(self):
        x = rand_map(4, 2, 13, 13)
        spec = conv_spec(5, 3, 2, 2, in_ch=2, seed=9)
        full = conv_forward(x, spec)  # 7x7 output
        m = [RegionMapping(dst=Rect(1, 1, 4, 4), src=Rect(1, 1, 4, 4))]
        out, _, _ = conv_forward_cached(x, spec, full, m)
        assert np.array_equal(out.data, full.data)


MODEL_TEXT = """\
input 3 32 32
c1 conv k=5 out_ch=4 s=2 p=2 in=data out=b1
r1 relu in=b1 out=b2
p1 pool k=2 s=2 in=b2 out=b3
c2 conv k=3 out_ch=6 s=1 p=1 in=b3 out=b4
f1 fc out=10 in=b4 out=b5
sm softmax in=b5 out=prob
"""

CONCAT_MODEL = """\
input 1 16 16
s1 scale factor=2.0 in=data out=a
b1 bias value=1.0 in=data out=b
cc concat in=a,b out=c
c1 conv k=3 out_ch=2 in=c out=d
"""


def make_session(text=MODEL_TEXT, seed=0, **kw) -> Session:
    graph = parse_model(text)
    load_weights(random_weights(graph, seed), graph)
    kw.setdefault("matcher_cfg", MatcherConfig(block_size=10, threshold_t=20.0,
                                               skip_k=1, search_range=8))
    return Session(graph, **kw)


class TestSession:
    def test_first_frame_is_flush(self):
        sess = make_session()
        frame = synth_sequence(1, 32, 32)[0]
        out, metrics = sess.run_frame(frame)
        assert metrics.flushed
        assert metrics.match_ratio == 0.0
        assert metrics.copied_pixels == 0
        assert metrics.computed_macs == metrics.total_macs > 0
        assert out.data.shape == (10, 1, 1)

    def test_identical_frame_reuses(self):
        sess = make_session()
        frame = synth_sequence(1, 32, 32)[0]
        out1, _ = sess.run_frame(frame)
        out2, metrics = sess.run_frame(Frame(frame.data.copy()))
        assert not metrics.flushed
        assert metrics.match_ratio > 0.8
        assert metrics.copied_pixels > 0
        assert metrics.computed_macs < metrics.total_macs
        assert np.array_equal(out1.data, out2.data)

    def test_expire_schedule(self):
        sess = make_session(expire_n=3)
        frames = synth_sequence(7, 32, 32, dx=1, dy=0)
        flushes = [sess.run_frame(f)[1].flushed for f in frames]
        assert flushes == [True, False, False, True, False, False, True]

    def test_cache_disabled_always_flushes(self):
        sess = make_session(cache_enabled=False)
        for f in synth_sequence(3, 32, 32):
            _, metrics = sess.run_frame(f)
            assert metrics.flushed
            assert metrics.copied_pixels == 0

    def test_infinite_threshold_matches_plain_bitwise(self):
        cfg = MatcherConfig(block_size=10, threshold_t=float("inf"),
                            skip_k=1, search_range=8)
        cached = make_session(matcher_cfg=cfg)
        plain = make_session(cache_enabled=False)
        for f in synth_sequence(5, 32, 32, dx=2, dy=1, noise=0.01, seed=3):
            out_c, m_c = cached.run_frame(f)
            out_p, _ = plain.run_frame(f)
            assert np.array_equal(out_c.data, out_p.data)
            assert m_c.copied_pixels == 0

    def test_per_layer_mac_identity_every_frame(self):
        sess = make_session()
        totals = sess.graph.conv_total_macs()
        for f in synth_sequence(6, 32, 32, dx=2, noise=0.005, seed=5):
            _, metrics = sess.run_frame(f)
            assert {e.name for e in metrics.per_layer} == set(totals)
            for e in metrics.per_layer:
                k2 = e.kernel * e.kernel
                assert e.computed_macs + e.copied_pixels * e.in_channels * k2 \
                    == e.total_macs == totals[e.name]
            assert metrics.computed_macs == sum(e.computed_macs
                                                for e in metrics.per_layer)
            assert metrics.total_macs == sum(totals.values())

    def test_near_exact_threshold_is_bitwise_at_stride_one(self):
        # threshold just under the zero-error sentinel: only blocks whose
        # match is pixel-exact verify.  With stride-1 layers throughout,
        # dst and src offsets can never straddle a stride boundary, so
        # every copied value must be bit-identical to a full forward.
        # (Strided layers may round misaligned offsets onto the stride
        # grid; those copies are deliberate approximations.)
        text = ("input 1 24 24\n"
                "c1 conv k=3 out_ch=4 p=1 in=data out=b1\n"
                "r1 relu in=b1 out=b2\n"
                "c2 conv k=3 out_ch=4 in=b2 out=b3\n"
                "n1 lrn r=1 in=b3 out=b4\n"
                "c3 conv k=3 out_ch=2 in=b4 out=b5\n")
        cfg = MatcherConfig(block_size=10, threshold_t=99.0,
                            skip_k=1, search_range=8)
        cached = make_session(text, seed=2, matcher_cfg=cfg)
        plain = make_session(text, seed=2, cache_enabled=False)
        reused_any = False
        for f in synth_sequence(6, 24, 24, channels=1, dx=2, dy=0, seed=7):
            out_c, m_c = cached.run_frame(f)
            out_p, _ = plain.run_frame(f)
            reused_any = reused_any or m_c.copied_pixels > 0
            assert np.array_equal(out_c.data, out_p.data)
        assert reused_any

    def test_lossy_threshold_reduces_work(self):
        sess = make_session(seed=2)
        fractions = []
        for f in synth_sequence(6, 32, 32, dx=2, dy=0, noise=0.01, seed=7):
            _, m = sess.run_frame(f)
            if not m.flushed:
                fractions.append(m.computed_macs / m.total_macs)
                assert m.match_ratio > 0.0
        assert fractions and min(fractions) < 0.9

    def test_dimension_mismatch(self):
        sess = make_session()
        with pytest.raises(ValueError, match="dims"):
            sess.run_frame(synth_sequence(1, 16, 16)[0])

    def test_concat_graph_cached_run(self):
        sess = make_session(CONCAT_MODEL, matcher_cfg=MatcherConfig(
            block_size=10, threshold_t=20.0, skip_k=1, search_range=4))
        frames = synth_sequence(2, 16, 16, channels=1, dx=0, dy=0, seed=11)
        out1, _ = sess.run_frame(frames[0])
        out2, metrics = sess.run_frame(frames[1])
        assert metrics.copied_pixels > 0
        assert np.array_equal(out1.data, out2.data)

    def test_outputs_always_finite(self):
        sess = make_session()
        for f in synth_sequence(4, 32, 32, dx=3, dy=2, noise=0.02, seed=13):
            out, _ = sess.run_frame(f)
            assert np.all(np.isfinite(out.data))

    def test_module_level_run_frame(self):
        sess = make_session()
        frame = synth_sequence(1, 32, 32)[0]
        out, metrics = run_frame(sess, frame)
        assert metrics.flushed
        assert out.data.shape == (10, 1, 1)
