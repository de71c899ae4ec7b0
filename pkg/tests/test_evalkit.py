import numpy as np
import pytest

from amflow.evalkit import displacement_agreement, total_variation
from amflow.flow import DisplacementMap, MotionFlow
from amflow.synth import FlowField


def flow_of(values, mode="hard"):
    frames, _, s, _ = values.shape
    gh = gw = int(np.sqrt(s))
    flow = MotionFlow(frames=frames, grid_h=gh, grid_w=gw, mode=mode)
    for i in range(frames):
        for j in range(frames):
            flow.maps[(i, j)] = DisplacementMap(source=i, target=j,
                                                delta=values[i, j].astype(np.float64), mode=mode)
    return flow


class TestAgreement:
    def test_identity(self):
        rng = np.random.default_rng(0)
        v = rng.integers(-2, 3, size=(2, 2, 4, 2)).astype(np.float64)
        v[0, 1, 0] = (1, 0)  # guarantee some nonzero reference entries
        rep = displacement_agreement(flow_of(v), flow_of(v))
        assert rep.cosine == pytest.approx(1.0)
        assert rep.endpoint_error == 0.0
        assert rep.exact_fraction == 1.0
        assert rep.within_one == 1.0

    def test_antiparallel(self):
        v = np.ones((2, 2, 4, 2))
        rep = displacement_agreement(flow_of(-v), flow_of(v))
        assert rep.cosine == pytest.approx(-1.0)

    def test_matches_brute_force(self):
        rng = np.random.default_rng(1)
        a = rng.integers(-2, 3, size=(2, 2, 4, 2)).astype(np.float64)
        b = rng.integers(-2, 3, size=(2, 2, 4, 2)).astype(np.float64)
        rep = displacement_agreement(flow_of(a), flow_of(b))

        cos_vals, epe_vals, exact_vals, n = [], [], [], 0
        for i in range(2):
            for j in range(2):
                for p in range(4):
                    vb = b[i, j, p]
                    if not np.any(vb != 0):
                        continue
                    n += 1
                    va = a[i, j, p]
                    epe_vals.append(np.linalg.norm(va - vb))
                    exact_vals.append(float(np.all(va == vb)))
                    if np.any(va != 0):
                        cos_vals.append(va @ vb / (np.linalg.norm(va) * np.linalg.norm(vb)))
                    else:
                        cos_vals.append(0.0)
        assert rep.count == n
        assert rep.cosine == pytest.approx(np.mean(cos_vals), abs=1e-6)
        assert rep.endpoint_error == pytest.approx(np.mean(epe_vals), abs=1e-6)
        assert rep.exact_fraction == pytest.approx(np.mean(exact_vals), abs=1e-6)

    def test_symmetric_under_union_policy(self):
        rng = np.random.default_rng(2)
        a = rng.integers(-1, 2, size=(2, 2, 9, 2)).astype(np.float64)
        b = rng.integers(-1, 2, size=(2, 2, 9, 2)).astype(np.float64)
        ab = displacement_agreement(flow_of(a), flow_of(b), "union-nonzero")
        ba = displacement_agreement(flow_of(b), flow_of(a), "union-nonzero")
        assert ab.endpoint_error == pytest.approx(ba.endpoint_error)
        assert ab.exact_fraction == pytest.approx(ba.exact_fraction)
        assert ab.count == ba.count

    def test_zero_vs_zero_counts_as_exact(self):
        a = np.zeros((2, 2, 4, 2))
        rep = displacement_agreement(flow_of(a), flow_of(a), "all")
        assert rep.exact_fraction == 1.0
        assert rep.cosine == 0.0  # nothing moves: no directions to compare

    def test_flowfield_mask_restricts_entries(self):
        delta = np.zeros((2, 2, 4, 2))
        delta[:, :, 0] = (1, 0)
        delta[:, :, 1] = (1, 0)
        mask = np.zeros((2, 4), dtype=bool)
        mask[:, 0] = True
        field = FlowField(frames=2, grid_h=2, grid_w=2, delta=delta, mask=mask)
        moved = np.zeros((2, 2, 4, 2))
        moved[:, :, 0] = (1, 0)
        rep = displacement_agreement(flow_of(moved), field, "mask-valid")
        assert rep.count == 4  # 2x2 frame pairs, one masked patch per source frame
        assert rep.cosine == pytest.approx(1.0)
        assert rep.exact_fraction == 1.0

    def test_rejects_geometry_mismatch(self):
        with pytest.raises(ValueError, match="geometry"):
            displacement_agreement(flow_of(np.zeros((2, 2, 4, 2))),
                                   flow_of(np.zeros((2, 2, 9, 2))))

    def test_rejects_unknown_policy(self):
        with pytest.raises(ValueError, match="policy"):
            displacement_agreement(flow_of(np.zeros((2, 2, 4, 2))),
                                   flow_of(np.zeros((2, 2, 4, 2))), "bogus")


class TestTotalVariation:
    def test_constant_flow_is_zero(self):
        v = np.tile(np.array([2.0, -1.0]), (2, 2, 9, 1))
        assert total_variation(flow_of(v)) == 0.0

    def test_interior_spike_contributes_four(self):
        v = np.zeros((2, 2, 9, 2))
        v[0, 1, 4, 0] = 1.0  # center cell of the 3x3 grid
        assert total_variation(flow_of(v)) == 4.0

    def test_matches_brute_force(self):
        rng = np.random.default_rng(3)
        v = rng.standard_normal((2, 2, 9, 2))
        flow = flow_of(v)
        want = 0.0
        for i in range(2):
            for j in range(2):
                grid = v[i, j].reshape(3, 3, 2)
                for r in range(3):
                    for c in range(3):
                        if r + 1 < 3:
                            want += np.abs(grid[r, c] - grid[r + 1, c]).sum()
                        if c + 1 < 3:
                            want += np.abs(grid[r, c] - grid[r, c + 1]).sum()
        assert total_variation(flow) == pytest.approx(want, rel=1e-6)

    def test_invariant_under_constant_shift_per_pair(self):
        rng = np.random.default_rng(4)
        v = rng.standard_normal((2, 2, 9, 2))
        shifted = v + np.array([5.0, -3.0])
        assert total_variation(flow_of(shifted)) == pytest.approx(total_variation(flow_of(v)))
