"""Track envelope construction against independent kinematic solutions."""

import math

import numpy as np
import pytest

from hybridlap import track as trk
from hybridlap.config import Config, TrackParams
from hybridlap.errors import SpecError


@pytest.fixture(scope="module")
def tp():
    return Config().track


@pytest.fixture(scope="module")
def profile(tp):
    return trk.make_track(tp)


class TestConstruction:
    def test_grid_size(self, tp, profile):
        total = sum(seg[1] for seg in tp.segments)
        assert profile.n == int(total / tp.ds)
        assert profile.length == total

    def test_corner_mask_and_drag(self, tp, profile):
        assert profile.corner.sum() == int(sum(
            seg[1] for seg in tp.segments if seg[0] == "corner") / tp.ds)
        assert np.all(profile.drag_extra[profile.corner] == tp.corner_drag)
        assert np.all(profile.drag_extra[~profile.corner] == 0.0)

    def test_apex_speeds_survive(self, tp, profile):
        pos = 0.0
        for kind, length, apex in tp.segments:
            i0 = int(pos / tp.ds)
            i1 = int((pos + length) / tp.ds)
            if kind == "corner":
                assert profile.v_max[i0:i1].min() == pytest.approx(apex)
            pos += length

    def test_envelope_never_exceeds_cap(self, tp, profile):
        assert profile.v_max.max() <= tp.v_cap + 1e-12

    def test_update_rate_floor(self, tp, profile):
        assert profile.v_max.min() >= tp.ds * trk.MIN_UPDATE_RATE

    def test_length_not_multiple_of_ds_rejected(self, tp):
        bad = TrackParams(segments=(("straight", 101.0, 0.0),))
        with pytest.raises(SpecError):
            trk.make_track(bad)


class TestEnvelopeKinematics:
    def test_braking_feasible_everywhere(self, tp, profile):
        """v[i]^2 <= v[i+1]^2 + 2 a ds around the whole loop."""
        v = profile.v_max
        for i in range(profile.n):
            j = (i + 1) % profile.n
            assert v[i] ** 2 <= v[j] ** 2 + 2.0 * tp.a_brake * tp.ds + 1e-9

    def test_traction_feasible_everywhere(self, tp, profile):
        v = profile.v_max
        for i in range(profile.n):
            j = (i + 1) % profile.n
            assert v[j] ** 2 <= v[i] ** 2 + 2.0 * tp.a_traction * tp.ds + 1e-9

    def test_braking_ramp_matches_closed_form(self, tp, profile):
        """Approaching the first corner the envelope must equal the
        constant-deceleration solution v(s) = sqrt(v_apex^2 + 2 a d)."""
        v = profile.v_max
        # first corner entry index
        entry = int(tp.segments[0][1] / tp.ds)
        apex = tp.segments[1][2]
        i = entry - 1
        d = tp.ds
        while v[i] < tp.v_cap - 1e-9 and d < 400.0:
            expect = math.sqrt(apex ** 2 + 2.0 * tp.a_brake * d)
            assert v[i] == pytest.approx(min(expect, tp.v_cap), rel=1e-12)
            i -= 1
            d += tp.ds

    def test_traction_ramp_matches_closed_form(self, tp, profile):
        v = profile.v_max
        entry = int(tp.segments[0][1] / tp.ds)
        exit_i = entry + int(tp.segments[1][1] / tp.ds)
        apex = tp.segments[1][2]
        i = exit_i
        d = tp.ds
        while v[i] < tp.v_cap - 1e-9 and i < exit_i + 60:
            expect = math.sqrt(apex ** 2 + 2.0 * tp.a_traction * d)
            if expect < tp.v_cap:
                assert v[i] == pytest.approx(expect, rel=1e-12)
            i += 1
            d += tp.ds

    def test_loop_closure_wraps(self, tp):
        """A corner at the very start must shape the envelope at the end."""
        wrap_tp = TrackParams(
            ds=2.0, v_cap=80.0, a_brake=42.0, a_traction=12.0,
            corner_drag=0.0,
            segments=(("corner", 40.0, 25.0), ("straight", 400.0, 0.0)))
        p = trk.make_track(wrap_tp)
        # last indices brake down toward the corner at index 0
        expect = math.sqrt(25.0 ** 2 + 2.0 * 42.0 * 2.0)
        assert p.v_max[-1] == pytest.approx(expect, rel=1e-12)
        # first indices accelerate out of the corner that wrapped
        assert p.v_max[0] == pytest.approx(25.0)


class TestRegionClassification:
    def test_riding_envelope_is_grip_limited(self, profile):
        b = trk.classify_region(profile.v_max.copy(), profile.v_max)
        assert b.all()

    def test_below_envelope_is_power_limited(self, profile):
        v = profile.v_max * 0.9
        b = trk.classify_region(v, profile.v_max)
        assert not b.any()

    def test_mixed(self, profile):
        v = profile.v_max.copy()
        v[:10] *= 0.8
        b = trk.classify_region(v, profile.v_max)
        assert not b[:10].any()
        assert b[10:].all()

    def test_shape_mismatch_rejected(self, profile):
        with pytest.raises(SpecError):
            trk.classify_region(profile.v_max[:-1], profile.v_max)


class TestScaledEnvelope:
    def test_scaling_one_corner_raises_only_nearby(self, tp, profile):
        entry = int(tp.segments[0][1] / tp.ds)
        n_cor = int(tp.segments[1][1] / tp.ds)
        scaled = trk.scale_apexes(tp, entry, entry + n_cor, 1.05, profile)
        assert scaled.v_max[entry:entry + n_cor].min() == pytest.approx(
            tp.segments[1][2] * 1.05)
        # the second corner apex is untouched
        pos = tp.segments[0][1] + tp.segments[1][1] + tp.segments[2][1]
        j0 = int(pos / tp.ds)
        j1 = j0 + int(tp.segments[3][1] / tp.ds)
        assert scaled.v_max[j0:j1].min() == pytest.approx(tp.segments[3][2])
        # never below the original anywhere
        assert np.all(scaled.v_max >= profile.v_max - 1e-9)

    def test_wrapped_range(self, tp, profile):
        scaled = trk.scale_apexes(tp, profile.n - 5, 5, 1.01, profile)
        assert scaled.v_max.shape == profile.v_max.shape


class TestRoundTrip:
    def test_save_load(self, tmp_path, profile):
        path = str(tmp_path / "track.txt")
        trk.save_track(path, profile)
        back = trk.load_track(path)
        assert back.n == profile.n
        assert back.ds == profile.ds
        assert np.array_equal(back.v_max, profile.v_max)
        assert np.array_equal(back.drag_extra, profile.drag_extra)
        assert np.array_equal(back.corner, profile.corner)

    def test_load_rejects_other_files(self, tmp_path):
        path = tmp_path / "junk.txt"
        path.write_text("hello\n")
        with pytest.raises(SpecError):
            trk.load_track(str(path))


class TestBinding:
    def test_corner_drag_reaches_plant(self, profile):
        pp = Config().plant()
        bound = profile.bind(pp)
        from hybridlap.plant import resistive_power
        i_straight = 5
        i_corner = int(np.flatnonzero(profile.corner)[0])
        v = 30.0
        p_s = resistive_power(v, bound, i_straight * profile.ds)
        p_c = resistive_power(v, bound, i_corner * profile.ds)
        assert p_c - p_s == pytest.approx(2400.0 * v)


class TestMiniTrack:
    def test_mini_builds(self):
        p = trk.make_track(trk.mini_track_params())
        assert p.length == 240.0
        assert p.v_max.min() == pytest.approx(22.0)
