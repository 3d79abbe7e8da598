import numpy as np
import pytest

from freeedit import experiments as X
from freeedit.metrics import MetricReport, ViewMetrics


class TestConfigs:
    def test_overfit_setup(self):
        cfg = X.overfit_config(1)
        assert cfg.edits == ("identity",) and cfg.seed == 1
        assert (cfg.m_lo, cfg.m_hi, cfg.n_points, cfg.iters) == (3, 3, 32, 2000)
        assert cfg.held_out == X.HELD_OUT
        cfg.validate()

    def test_ablations(self):
        assert X.edit_config("no_self").lambda_s == 0.0
        assert X.edit_config("no_consistency").lambda_c == 0.0
        full = X.edit_config("full")
        assert full.lambda_s > 0 and full.lambda_c > 0 and len(full.edits) == 6

    def test_cache_key_tracks_config(self):
        assert X.cache_key(X.overfit_config(0)) == X.cache_key(X.overfit_config(0))
        assert X.cache_key(X.overfit_config(0)) != X.cache_key(X.overfit_config(1))

    def test_scenes(self):
        scenes = X.experiment_scenes()
        assert len(scenes) == 2 and all(s.n_views == 16 and s.height == 48 for s in scenes)


class TestRunCached:
    def test_second_call_uses_cache(self, tmp_path, tiny_train_cfg, tiny_scenes):
        cfg = tiny_train_cfg(iters=3)
        first = X.run_cached(cfg, tiny_scenes, tmp_path)
        assert not first.cached and first.state.iteration == 3
        second = X.run_cached(tiny_train_cfg(iters=3), tiny_scenes, tmp_path)
        assert second.cached and second.path == first.path
        assert second.state.log == first.state.log
        assert second.train_seconds == pytest.approx(sum(r[-1] for r in first.state.log) / 1000)

    def test_partial_run_resumes(self, tmp_path, tiny_train_cfg, tiny_scenes):
        from freeedit.trainer import init_state, save_checkpoint, train
        cfg = tiny_train_cfg(iters=4)
        path = tmp_path / f"{X.cache_key(cfg)}.ckpt"
        save_checkpoint(train(init_state(tiny_train_cfg(iters=4)), tiny_scenes, until=2), path)
        res = X.run_cached(cfg, tiny_scenes, tmp_path)
        straight = train(init_state(tiny_train_cfg(iters=4)), tiny_scenes)
        assert not res.cached and [r[:7] for r in res.state.log] == [r[:7] for r in straight.log]

    def test_corrupt_cache_retrains(self, tmp_path, tiny_train_cfg, tiny_scenes):
        cfg = tiny_train_cfg(iters=2)
        (tmp_path / f"{X.cache_key(cfg)}.ckpt").write_bytes(b"junk")
        res = X.run_cached(cfg, tiny_scenes, tmp_path)
        assert res.state.iteration == 2


def test_edit_margins():
    rows = [ViewMetrics("s", "identity", 3, 20.0, 0.9, 20.0, 0.9),
            ViewMetrics("s", "invert", 3, 15.0, 0.5, 6.0, 0.1),
            ViewMetrics("s", "invert", 11, 17.0, 0.5, 8.0, 0.1)]
    assert X.edit_margins(MetricReport(rows)) == {"invert": pytest.approx(9.0)}
