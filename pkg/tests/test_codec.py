import numpy as np
import pytest

from nextscale import codec as cd
from nextscale.ndcore import Rng


@pytest.fixture
def schedule8():
    return cd.ScaleSchedule.square([1, 2, 3, 4, 6, 8])


def brute_force_nearest(vecs: np.ndarray, entries: np.ndarray) -> np.ndarray:
    """Independent exhaustive scan: per vector, loop every entry."""
    out = np.empty(len(vecs), dtype=np.int64)
    for i, v in enumerate(vecs):
        best, best_d = 0, np.inf
        for j, e in enumerate(entries):
            d = np.sum((v - e) ** 2)
            if d < best_d:
                best, best_d = j, d
        out[i] = best
    return out


class TestScaleSchedule:
    def test_areas_must_increase(self):
        with pytest.raises(cd.CodecError, match="increase"):
            cd.ScaleSchedule.square([1, 2, 2])

    def test_needs_one_scale(self):
        with pytest.raises(cd.CodecError):
            cd.ScaleSchedule(())

    def test_token_counts_and_offsets(self, schedule8):
        assert schedule8.token_counts() == [1, 4, 9, 16, 36, 64]
        assert schedule8.offsets() == [0, 1, 5, 14, 30, 66]
        assert schedule8.total_tokens() == 130


class TestQuantize:
    def test_exact_entry_maps_to_itself(self):
        rng = Rng(0)
        book = cd.Codebook(rng.normal((10, 4)))
        latent = np.broadcast_to(book.entries[5][:, None, None], (4, 2, 2)).copy()
        assert (cd.quantize(latent, book) == 5).all()

    def test_tie_break_lowest_index(self):
        entries = np.zeros((12, 3))
        entries[3] = [1.0, 0.0, 0.0]
        entries[9] = [-1.0, 0.0, 0.0]
        book = cd.Codebook(entries + 10.0)  # move zero entries away
        latent = np.full((3, 1, 1), 10.0)  # equidistant from entries 3 and 9
        latent[0, 0, 0] = 10.0
        assert cd.quantize(latent, book)[0, 0] == 0  # entries 0..2 are all exactly at 10

    def test_tie_break_between_two_offset_entries(self):
        entries = np.array([[5.0], [1.0], [3.0]])
        book = cd.Codebook(entries)
        latent = np.full((1, 1, 1), 2.0)  # equidistant from 1.0 and 3.0
        assert cd.quantize(latent, book)[0, 0] == 1

    def test_matches_brute_force_oracle(self):
        rng = Rng(1)
        book = cd.Codebook(rng.normal((64, 16)))
        latent = rng.normal((16, 10, 10))
        got = cd.quantize(latent, book)
        vecs = latent.reshape(16, -1).T
        assert np.array_equal(got.reshape(-1), brute_force_nearest(vecs, book.entries))

    def test_empty_codebook_rejected(self):
        with pytest.raises(cd.CodecError):
            cd.Codebook(np.zeros((0, 3)))

    def test_channel_mismatch_rejected(self):
        book = cd.Codebook(np.zeros((4, 3)))
        with pytest.raises(cd.CodecError, match="channels"):
            cd.quantize(np.zeros((2, 2, 2)), book)


class TestResample:
    def test_constant_preserved_exactly(self, schedule8):
        const = np.full((3, 8, 8), 0.7321)
        for h, w in schedule8.resolutions:
            assert (cd.downsample(const, (h, w)) == 0.7321).all()
        small = np.full((3, 3, 3), -1.25)
        assert (cd.upsample(small, (8, 8)) == -1.25).all()

    def test_mean_pool_2x2_to_1(self):
        x = np.array([[[1.0, 3.0], [5.0, 7.0]]])
        assert cd.downsample(x, (1, 1))[0, 0, 0] == 4.0

    def test_down_requires_smaller_target(self):
        with pytest.raises(cd.CodecError):
            cd.downsample(np.zeros((1, 2, 2)), (4, 4))
        with pytest.raises(cd.CodecError):
            cd.upsample(np.zeros((1, 4, 4)), (2, 2))

    def test_up_then_down_roundtrip_error_bounded(self):
        rng = Rng(2)
        x = rng.uniform((1, 6, 6))
        back = cd.downsample(cd.upsample(x, (12, 12)), (6, 6))
        value_range = x.max() - x.min()
        assert np.abs(back - x).max() < 0.25 * value_range

    def test_identity_when_same_shape(self):
        x = np.arange(12.0).reshape(1, 3, 4)
        assert cd.upsample(x, (3, 4)) is x
        assert cd.downsample(x, (3, 4)) is x

    def test_area_rows_sum_to_one(self):
        for n_in, n_out in [(8, 3), (8, 6), (16, 6), (16, 1)]:
            m = cd._area_matrix_1d(n_in, n_out)
            assert np.array_equal(m.sum(axis=1), np.ones(n_out))

    def test_bilinear_rows_sum_to_one(self):
        for n_in, n_out in [(1, 8), (2, 8), (3, 8), (6, 8), (4, 16)]:
            m = cd._bilinear_matrix_1d(n_in, n_out)
            assert np.array_equal(m.sum(axis=1), np.ones(n_out))


class TestResidualDecomposition:
    def test_single_scale_is_plain_quantization(self):
        rng = Rng(3)
        book = cd.Codebook(rng.normal((16, 4)))
        f = rng.normal((4, 2, 2))
        sched = cd.ScaleSchedule.square([2])
        toks = cd.residual_decompose(f, sched, book)
        assert len(toks) == 1
        assert np.array_equal(toks[0], cd.quantize(f, book))

    def test_resolution_mismatch_rejected(self, schedule8):
        book = cd.Codebook(np.zeros((4, 3)))
        with pytest.raises(cd.CodecError, match="resolution"):
            cd.residual_decompose(np.zeros((3, 4, 4)), schedule8, book)

    def test_error_nonincreasing_when_first_scale_exact(self):
        # f representable at scale 1 by one entry: after scale 1 the
        # residual is zero, and with a zero entry available the second
        # scale quantizes it to zero, so error cannot increase
        rng = Rng(4)
        entries = rng.normal((8, 4))
        entries[0] = 0.0
        book = cd.Codebook(entries)
        sched = cd.ScaleSchedule.square([1, 2])
        f = np.broadcast_to(entries[3][:, None, None], (4, 2, 2)).copy()
        toks = cd.residual_decompose(f, sched, book)
        e1 = np.linalg.norm(f - cd.reconstruct(toks[:1], sched, book, 2))
        e2 = np.linalg.norm(f - cd.reconstruct(toks, sched, book, 2))
        assert e2 <= e1 + 1e-12

    def test_telescoping_monotone_on_random_latents(self, schedule8):
        # spatially correlated random latents (image-like); iid noise can
        # overshoot at the coarsest transition and is not image-like
        rng = Rng(5)
        latents = []
        for i in range(100):
            r = rng.child(i)
            latents.append(cd.upsample(r.normal((16, 4, 4)), (8, 8)) + 0.3 * r.normal((16, 8, 8)))
        book = cd.fit_codebook(latents, 64, rng.child(1000), iters=20)
        for f in latents:
            toks = cd.residual_decompose(f, schedule8, book)
            errs = [
                np.linalg.norm(f - cd.reconstruct(toks[: k + 1], schedule8, book, schedule8.K))
                for k in range(schedule8.K)
            ]
            for a, b in zip(errs, errs[1:]):
                assert b <= a + 1e-6


class TestReconstruct:
    def test_native_single_scale_is_lookup(self):
        rng = Rng(6)
        book = cd.Codebook(rng.normal((8, 4)))
        sched = cd.ScaleSchedule.square([3])
        toks = [rng.integers(0, 8, (3, 3))]
        out = cd.reconstruct(toks, sched, book)
        assert np.array_equal(out, book.lookup(toks[0]))

    def test_zero_entry_gives_zero_latent(self):
        entries = np.ones((4, 2))
        entries[0] = 0.0
        book = cd.Codebook(entries)
        sched = cd.ScaleSchedule.square([1, 2])
        toks = [np.zeros((1, 1), dtype=int), np.zeros((2, 2), dtype=int)]
        assert (cd.reconstruct(toks, sched, book) == 0).all()

    def test_missing_scale_rejected(self, schedule8):
        book = cd.Codebook(np.zeros((4, 3)))
        with pytest.raises(cd.CodecError):
            cd.reconstruct([], schedule8, book)


class TestFullScaleTargets:
    def test_final_scale_is_identity_quantization(self, schedule8):
        rng = Rng(7)
        book = cd.Codebook(rng.normal((32, 6)))
        z = rng.normal((6, 8, 8))
        targets = cd.full_scale_targets(z, schedule8, book)
        assert np.array_equal(targets[-1], cd.quantize(z, book))

    def test_constant_latent_hits_matching_entry_everywhere(self, schedule8):
        rng = Rng(8)
        entries = rng.normal((16, 4))
        book = cd.Codebook(entries)
        z = np.broadcast_to(entries[7][:, None, None], (4, 8, 8)).copy()
        for t in cd.full_scale_targets(z, schedule8, book):
            assert (t == 7).all()

    def test_checkerboard_pools_to_hand_computed_average(self):
        # 2x2 checkerboard of entries a/b pools to the midpoint at 1x1;
        # a third entry placed exactly at the midpoint must win there
        a = np.array([1.0, 0.0])
        b = np.array([0.0, 1.0])
        mid = (a + b) / 2
        book = cd.Codebook(np.stack([a, b, mid]))
        z = np.zeros((2, 2, 2))
        z[:, 0, 0] = z[:, 1, 1] = a
        z[:, 0, 1] = z[:, 1, 0] = b
        sched = cd.ScaleSchedule.square([1, 2])
        targets = cd.full_scale_targets(z, sched, book)
        assert targets[0][0, 0] == 2  # the hand-computed pooled value
        assert np.array_equal(targets[1], np.array([[0, 1], [1, 0]]))


class TestFitCodebook:
    def test_recovers_separated_clusters(self):
        rng = Rng(9)
        k, dim = 8, 3
        centers = rng.normal((k, dim)) * 20.0
        samples = []
        for i in range(k):
            pts = centers[i] + 0.01 * rng.child(i).normal((50, dim))
            samples.append(pts)
        vecs = np.concatenate(samples)
        maps = [vecs.T.reshape(dim, -1, 1)]
        book = cd.fit_codebook(maps, k, rng.child(99), iters=50)
        d = np.sqrt(((book.entries[:, None, :] - centers[None]) ** 2).sum(-1))
        assert (d.min(axis=0) < 0.1).all()

    def test_exact_when_sizes_match(self):
        rng = Rng(10)
        vecs = rng.normal((6, 4))
        maps = [vecs.T.reshape(4, 6, 1)]
        book = cd.fit_codebook(maps, 6, rng.child(1), iters=10)
        got = sorted(map(tuple, np.round(book.entries, 9)))
        want = sorted(map(tuple, np.round(vecs, 9)))
        assert got == want

    def test_deterministic_given_seed(self):
        rng_data = Rng(11)
        maps = [rng_data.normal((4, 6, 6))]
        b1 = cd.fit_codebook(maps, 8, Rng(5), iters=20)
        b2 = cd.fit_codebook(maps, 8, Rng(5), iters=20)
        assert np.array_equal(b1.entries, b2.entries)

    def test_insufficient_distinct_vectors_reported(self):
        maps = [np.ones((3, 2, 2))]
        with pytest.raises(cd.CodecError, match="distinct"):
            cd.fit_codebook(maps, 8, Rng(0))


class TestPatchCodec:
    def test_zero_image_zero_latent(self):
        codec = cd.PatchCodec.orthogonal(Rng(12), patch=4, in_channels=1, dim=16)
        z = codec.encode(np.zeros((1, 32, 32)))
        assert (z == 0).all()

    def test_latent_shape(self):
        codec = cd.PatchCodec.orthogonal(Rng(13), patch=4, in_channels=1, dim=16)
        z = codec.encode(np.zeros((1, 32, 32)))
        assert z.shape == (16, 8, 8)

    def test_hand_set_projection(self):
        # patch 1, dim 1: encoding is a plain scalar multiply
        codec = cd.PatchCodec(patch=1, in_channels=1, dim=1, weight=np.array([[2.0]]))
        img = np.arange(4.0).reshape(1, 2, 2)
        assert np.array_equal(codec.encode(img), img * 2.0)

    def test_known_patch_projection(self):
        w = np.zeros((2, 4))
        w[0, 0] = 1.0  # picks top-left pixel
        w[1] = 0.25    # patch mean
        codec = cd.PatchCodec(patch=2, in_channels=1, dim=2, weight=w)
        img = np.array([[[1.0, 2.0], [3.0, 4.0]]])
        z = codec.encode(img)
        assert z[0, 0, 0] == 1.0
        assert z[1, 0, 0] == 2.5

    def test_roundtrip_exact_for_square_orthogonal(self):
        rng = Rng(14)
        codec = cd.PatchCodec.orthogonal(rng, patch=4, in_channels=1, dim=16)
        x = rng.uniform((1, 32, 32))
        back = codec.decode(codec.encode(x))
        assert np.abs(back - x).max() < 1e-5

    def test_indivisible_dimensions_rejected(self):
        codec = cd.PatchCodec.orthogonal(Rng(15), patch=4, in_channels=1, dim=16)
        with pytest.raises(cd.CodecError, match="divisible"):
            codec.encode(np.zeros((1, 30, 32)))

    def test_zero_latent_decodes_to_bias(self):
        codec = cd.PatchCodec.orthogonal(Rng(16), patch=4, in_channels=1, dim=16)
        codec.out_bias = 0.25
        img = codec.decode(np.zeros((16, 2, 2)))
        assert np.allclose(img, 0.25)

    def test_state_roundtrip(self):
        codec = cd.PatchCodec.orthogonal(Rng(17), patch=8, in_channels=1, dim=64)
        back = cd.PatchCodec.from_state(codec.state_arrays())
        assert back.patch == 8 and back.dim == 64
        assert np.array_equal(back.weight, codec.weight)


def test_lloyd_refine_moves_to_means():
    vecs = np.array([[0.0], [2.0], [10.0], [12.0]])
    centers = np.array([[1.5], [10.5]])
    out = cd.lloyd_refine(vecs, centers, iters=10)
    assert np.allclose(sorted(out.ravel()), [1.0, 11.0])
