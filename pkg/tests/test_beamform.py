"""Delay-and-sum beamforming and the echo-shift reference model."""

import numpy as np
import pytest

from soscorr.beamform import BFConfig, das_beamform, echo_shift_model
from soscorr.delaytrack import TrackConfig, track_delays
from soscorr.geometry import ImagingGrid, TransducerArray
from soscorr.synthsim import (
    ChannelFrame,
    MediumSpec,
    PulseSpec,
    ScattererField,
    required_samples,
    simulate_frame,
)


def make_medium():
    grid = ImagingGrid(x0=-0.02 + 1.5e-4, z0=1.5e-4, dx=3e-4, dz=3e-4,
                       nx=134, nz=134)
    return MediumSpec(background_sos=1500.0, grid=grid)


class TestDASBeamform:
    def test_zero_input_gives_zero_output(self):
        array = TransducerArray()
        frame = ChannelFrame(
            tx_element=63,
            samples=np.zeros((128, 256), dtype=np.float32),
            t0=0.0, fs=1.6e8,
        )
        grid = ImagingGrid(x0=-2e-3, z0=5e-3, dx=2e-4, dz=1e-4, nx=21, nz=31)
        out = das_beamform(frame, array, BFConfig(c_bf=1500.0, grid=grid))
        assert not np.any(out.rf)
        assert out.c_bf_used == 1500.0
        assert out.grid == grid

    def test_single_scatterer_focuses_at_true_position(self):
        array = TransducerArray()
        pulse = PulseSpec()
        medium = make_medium()
        field = ScattererField(positions=np.array([[0.0, 0.02]]),
                               amplitudes=np.array([1.0]), rng_seed=0)
        n = required_samples(63, field, medium, pulse, array)
        frame = simulate_frame(63, field, medium, pulse, array, n)
        grid = ImagingGrid(x0=-2e-3, z0=18e-3, dx=1e-4, dz=5e-5, nx=41, nz=81)
        out = das_beamform(frame, array, BFConfig(c_bf=1500.0, grid=grid))
        iz, ix = np.unravel_index(np.argmax(np.abs(out.rf)), out.rf.shape)
        x_peak = grid.x0 + ix * grid.dx
        z_peak = grid.z0 + iz * grid.dz
        assert abs(x_peak - 0.0) <= grid.dx + 1e-12
        assert abs(z_peak - 0.02) <= grid.dz + 1e-12

    def test_channel_count_mismatch(self):
        array = TransducerArray(num_elements=64)
        frame = ChannelFrame(tx_element=0,
                             samples=np.zeros((128, 16), dtype=np.float32),
                             t0=0.0, fs=1.6e8)
        grid = ImagingGrid(x0=0, z0=1e-3, dx=1e-4, dz=1e-4, nx=4, nz=4)
        with pytest.raises(ValueError, match="channels"):
            das_beamform(frame, array, BFConfig(c_bf=1500.0, grid=grid))

    def test_config_validation(self):
        grid = ImagingGrid(x0=0, z0=1e-3, dx=1e-4, dz=1e-4, nx=4, nz=4)
        with pytest.raises(ValueError):
            BFConfig(c_bf=900.0, grid=grid)
        with pytest.raises(ValueError):
            BFConfig(c_bf=1500.0, grid=grid, apodization="tukey")
        with pytest.raises(ValueError):
            BFConfig(c_bf=1500.0, grid=grid, f_number=-1.0)

    def test_zero_offset_pair_tracks_to_null(self, full_cfg, null_estimate):
        """Matched BF-SoS leaves the (55, 65) pair with near-zero delays."""
        _, _, dmap = null_estimate
        med = np.median(np.abs(dmap.delays[dmap.valid]))
        one_sample = 1.0 / full_cfg.pulse.sampling_frequency
        assert med < one_sample

    def test_self_tracking_is_identity(self, full_cfg, est_frames):
        grid = full_cfg.estimation_grid()
        fa = das_beamform(est_frames[55], full_cfg.array,
                          BFConfig(c_bf=1500.0, grid=grid))
        dmap = track_delays(fa, fa, TrackConfig(axial_step=16, lateral_step=8))
        assert np.all(dmap.valid)
        assert np.allclose(dmap.delays, 0.0)
        assert np.allclose(dmap.ncc, 1.0)


class TestEchoShiftModel:
    def test_matched_sos_is_zero(self):
        assert echo_shift_model(1500.0, 1500.0, 0.03) == 0.0

    def test_hand_value(self):
        v = echo_shift_model(1500.0, 1540.0, 0.03)
        assert v == pytest.approx(0.03 * (1540 - 1500) / (1500.0 * 1540.0))
        assert v == pytest.approx(5.1948e-7, rel=1e-4)

    def test_sign_for_underestimated_bf_sos(self):
        assert echo_shift_model(1500.0, 1480.0, 0.02) < 0.0

    def test_rejects_nonpositive_speeds(self):
        with pytest.raises(ValueError):
            echo_shift_model(0.0, 1500.0, 0.01)
