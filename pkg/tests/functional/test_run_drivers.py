"""
End-to-End tests for the run drivers behind the CLI verbs

Each driver runs at a small size into a temporary results directory;
the tests check the returned summaries and the files written.
"""

import numpy as np
import pytest

from flow.fields import read_field, read_snapshot, read_spectrum_csv
from fmm.partition import multisection
from harness import runs
from harness.config import RunConfig
from fmm.timers import Category
from harness.runs import fmm_bench, partition_test, run_spectral, run_vortex, run_weak_scaling


def _config(output_dir, **changes):
    return RunConfig(output_dir=str(output_dir), **changes).validate()


class TestVortexRun:
    """
    run-vortex: lattice initialization, distributed steps, snapshots and report.
    """

    @pytest.mark.smoke
    def test_zero_steps_writes_initial_outputs(self, output_dir):
        config = _config(output_dir, lattice_n=8, steps=0, p=4, periodic_shells=1)
        run = run_vortex(config)

        assert len(run.particles) == 512
        assert run.time == 0.0
        assert len(run.snapshots) == 1 and len(run.spectra) == 1
        assert run.report_path is None
        particles, t = read_snapshot(run.snapshots[0])
        assert t == 0.0
        np.testing.assert_array_equal(particles.positions, run.particles.positions)
        assert config.config_hash() in run.snapshots[0].name

    @pytest.mark.slow
    @pytest.mark.distributed
    def test_short_run_on_two_ranks(self, output_dir):
        config = _config(output_dir, lattice_n=8, steps=2, dt=0.01, nu=0.02, p=4, theta=0.5, n_crit=32,
                         periodic_shells=1, reinit_every=2, ranks=2)

        print("\n[Step 1] Two steps on two ranks with one reinitialization...")
        run = run_vortex(config)
        print(f"[OK] t={run.time:.3f}, {len(run.particles)} particles")

        print("\n[Step 2] Checking state and outputs...")
        assert run.time == pytest.approx(0.02)
        assert len(run.particles) == 512
        assert np.all(np.abs(run.particles.positions) <= np.pi + 1e-12)
        assert np.all(np.isfinite(run.particles.gammas))
        assert len(run.snapshots) == 2 and len(run.spectra) == 2
        assert "step00002" in run.snapshots[1].name
        assert read_spectrum_csv(run.spectra[1]).E[1:].sum() > 0

        lines = run.report_path.read_text().splitlines()
        assert lines[0] == f"# config_hash={config.config_hash()}"
        keys = [line.split("=")[0] for line in lines if not line.startswith("#")]
        for name in Category.ALL:
            assert name in keys
        assert run.report.model_flops > 0
        assert run.report.ranks == 2
        print("[OK] Vortex run outputs verified")

    @pytest.mark.distributed
    def test_partitions_once_per_run(self, output_dir, monkeypatch):
        calls = []

        def counted(comm, *args, **kwargs):
            calls.append(comm.rank)
            return multisection(comm, *args, **kwargs)

        monkeypatch.setattr(runs, "multisection", counted)
        config = _config(output_dir, lattice_n=8, steps=3, dt=0.01, nu=0.02, p=4, theta=0.5, n_crit=32,
                         periodic_shells=1, reinit_every=0, ranks=2)
        run = runs.run_vortex(config)

        assert sorted(calls) == [0, 1]
        assert run.time == pytest.approx(0.03)
        assert len(run.particles) == 512
        np.testing.assert_array_equal(run.particles.ids, np.arange(512))


class TestSpectralRun:
    """
    run-spectral: fields and spectra at the first and last step.
    """

    @pytest.mark.smoke
    def test_writes_fields_and_spectra(self, output_dir):
        config = _config(output_dir, lattice_n=8, steps=3, dt=0.01, nu=0.1)
        run = run_spectral(config)

        assert len(run.spectra) == 2
        assert len(run.fields) == 4
        first, last = (read_spectrum_csv(path) for path in run.spectra)
        assert first.E[1:].sum() == pytest.approx(config.energy, rel=1e-10)
        assert last.E[1:].sum() < first.E[1:].sum()

        velocity = read_field(run.fields[0])
        assert velocity.values.shape == (3, 8, 8, 8)
        q = read_field(run.fields[1])
        assert q.values.shape == (8, 8, 8)
        assert abs(q.values.mean()) < 1e-10


class TestPartitionRun:
    """
    partition-test: multisection against Morton-order partitioning.
    """

    @pytest.mark.distributed
    def test_multisection_is_balanced_and_disjoint(self, output_dir):
        config = _config(output_dir, n_particles=1000, ranks=4)
        orb, morton = partition_test(config)

        assert orb.method == "multisection"
        assert sum(orb.counts) == 1000
        assert max(orb.counts) - min(orb.counts) <= 1
        assert orb.overlap_volume == pytest.approx(0.0, abs=1e-12)
        assert morton.method == "morton"
        assert sum(morton.counts) == 1000
        assert max(morton.counts) - min(morton.counts) <= 1
        assert any(output_dir.glob("partition_*.csv"))


class TestFmmBench:
    """
    fmm-bench: accuracy and timing over expansion orders.
    """

    @pytest.mark.smoke
    def test_error_falls_with_order(self, output_dir):
        config = _config(output_dir, n_particles=500, p_list=(4, 8), theta=0.4, n_crit=32)
        rows = fmm_bench(config)

        assert [r.p for r in rows] == [4, 8]
        assert rows[1].rel_l2_error < rows[0].rel_l2_error
        assert all(r.p2p_pairs > 0 and r.seconds > 0 for r in rows)
        csv_path = next(output_dir.glob("fmm_bench_*.csv"))
        assert "p,rel_l2_error,seconds,p2p_pairs,m2l_pairs" in csv_path.read_text().splitlines()


@pytest.mark.distributed
class TestWeakScaling:
    """
    weak-scaling: fixed particles per rank, efficiency against one rank.
    """

    @pytest.mark.flaky(reruns=2)
    def test_efficiency_and_overlap(self, output_dir):
        config = _config(output_dir, particles_per_rank=300, rank_list=(1, 2), p=4, theta=0.5, n_crit=32)

        print("\n[Step 1] Weak scaling over 1 and 2 ranks...")
        rows = run_weak_scaling(config)
        for row in rows:
            print(f"  - P={row.ranks}: {row.wall_time:.3f}s, efficiency {row.efficiency:.3f}")

        print("\n[Step 2] Checking the table...")
        assert [r.ranks for r in rows] == [1, 2]
        assert [r.particles for r in rows] == [300, 600]
        assert rows[0].efficiency == 1.0
        assert all(r.wall_time > 0 and r.efficiency > 0 for r in rows)
        for row in rows:
            assert row.report.categories[Category.VISIBLE_COMM] <= row.report.comm_total + 1e-12
            assert row.report.model_flops > 0
        assert any(output_dir.glob("weak_scaling_*.csv"))
        print("[OK] Weak scaling table verified")

    def test_efficiency_is_relative_to_the_first_rank_count(self, output_dir):
        config = _config(output_dir, particles_per_rank=200, rank_list=(2, 4), p=4, theta=0.5, n_crit=32)
        rows = run_weak_scaling(config)

        assert [r.ranks for r in rows] == [2, 4]
        assert rows[0].efficiency == 1.0
        assert all(np.isfinite(r.efficiency) and r.efficiency > 0 for r in rows)
        csv_text = next(output_dir.glob("weak_scaling_*.csv")).read_text()
        assert "# baseline_ranks=2" in csv_text.splitlines()
