import csv

import numpy as np
import pytest

from anticipation import tensor as tn
from anticipation import training as tr
from anticipation.errors import ConfigError, TrainingError
from anticipation.graphs import CandidateGraph, CandidateGraphSet

from conftest import small_config


@pytest.fixture(scope="module")
def setup(small_dataset):
    cfg = small_config()
    ds = tr.load_dataset(small_dataset, cfg.N)
    train_v, val_v = tr.split_videos(ds.videos, cfg.seed, cfg.val_fraction)
    cands = tr.build_candidates(train_v, cfg)
    return cfg, ds, train_v, val_v, cands


@pytest.fixture(scope="module")
def trained(setup, tmp_path_factory):
    cfg, ds, train_v, val_v, cands = setup
    out = tmp_path_factory.mktemp("run")
    res = tr.train(cfg, train_v, val_v, cands, out, ds.events, ds.event_kinds, epochs=4)
    return out, res


def read_log(path):
    return list(csv.DictReader(open(path)))


class TestData:
    def test_load(self, setup):
        cfg, ds, *_ = setup
        assert len(ds.videos) == 6 and len(ds.events) == 13
        v = ds.videos[0]
        assert v.boxes.data.shape == (v.frames, 8, 5)

    def test_split_by_video(self, setup):
        cfg, ds, train_v, val_v, _ = setup
        assert len(val_v) == 1 and len(train_v) == 5
        names = {v.name for v in train_v} | {v.name for v in val_v}
        assert len(names) == 6

    def test_split_deterministic_and_seeded(self, setup):
        _, ds, *_ = setup
        a = [v.name for v in tr.split_videos(ds.videos, 0, 0.5)[1]]
        assert a == [v.name for v in tr.split_videos(ds.videos, 0, 0.5)[1]]
        others = {tuple(v.name for v in tr.split_videos(ds.videos, s, 0.5)[1]) for s in range(10)}
        assert len(others) > 1

    def test_split_eighty_twenty(self):
        train_v, val_v = tr.split_videos(list(range(25)), 0, 0.2)
        assert (len(train_v), len(val_v)) == (20, 5)

    def test_node_count_mismatch(self, small_dataset):
        with pytest.raises(ConfigError, match="N=5"):
            tr.load_dataset(small_dataset, 5)

    def test_missing_directory(self, tmp_path):
        with pytest.raises(ConfigError):
            tr.load_dataset(tmp_path / "nope")


class TestTrain:
    def test_outputs_and_log(self, trained, setup):
        out, res = trained
        cfg = setup[0]
        for name in ("model.ckpt", "last.ckpt", "epoch_001.ckpt", "epoch_004.ckpt", "train_log.csv"):
            assert (out / name).exists()
        rows = read_log(out / "train_log.csv")
        assert [int(r["epoch"]) for r in rows] == [1, 2, 3, 4]
        assert list(rows[0]) == ["epoch", "loss", "val_metric", "val_inMAE_2", "val_oMAE_2", "val_inMAE_3",
                                 "val_oMAE_3", "val_inMAE_5", "val_oMAE_5", "lambda_hat_2", "lambda_hat_3",
                                 "lambda_hat_5", "lambda_hat_7"]
        for r in rows:
            assert np.isfinite(float(r["loss"])) and float(r["lambda_hat_7"]) > 0
        best = min(rows, key=lambda r: float(r["val_metric"]))
        assert res.best_epoch == int(best["epoch"])
        assert res.checkpoint == out / "model.ckpt"

    def test_selected_checkpoint_is_best_epoch(self, trained):
        out, res = trained
        a = (out / "model.ckpt").read_bytes()
        assert a == (out / f"epoch_{res.best_epoch:03d}.ckpt").read_bytes()

    def test_resume_reproduces_trajectory(self, trained, setup, tmp_path):
        cfg, ds, train_v, val_v, cands = setup
        out, res = trained
        tr.train(cfg, train_v, val_v, cands, tmp_path, ds.events, ds.event_kinds, epochs=2)
        tr.train(cfg, train_v, val_v, cands, tmp_path, ds.events, ds.event_kinds,
                 resume=tmp_path / "last.ckpt", epochs=4)
        assert (tmp_path / "train_log.csv").read_text() == (out / "train_log.csv").read_text()
        a, _ = tn.load_tensors(out / "last.ckpt")
        b, _ = tn.load_tensors(tmp_path / "last.ckpt")
        assert a.keys() == b.keys()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])

    def test_resume_rejects_changed_config(self, trained, setup, tmp_path):
        cfg, ds, train_v, val_v, cands = setup
        out, _ = trained
        other = small_config(seed=9)
        with pytest.raises(ConfigError, match="different configuration"):
            tr.train(other, train_v, val_v, cands, tmp_path, ds.events, resume=out / "last.ckpt", epochs=5)

    def test_non_finite_loss_aborts_keeping_last_good(self, setup, tmp_path):
        cfg, ds, train_v, val_v, cands = setup
        tr.train(cfg, train_v, val_v, cands, tmp_path, ds.events, epochs=1)
        ck = tr.load_checkpoint(tmp_path / "last.ckpt")
        ck.model.head.W2.data[:] = np.nan
        tr.save_checkpoint(tmp_path / "last.ckpt", ck)
        kept = (tmp_path / "last.ckpt").read_bytes()
        with pytest.raises(TrainingError, match="last good checkpoint"):
            tr.train(cfg, train_v, val_v, cands, tmp_path, ds.events, resume=tmp_path / "last.ckpt", epochs=2)
        assert (tmp_path / "last.ckpt").read_bytes() == kept


class TestCheckpoint:
    def test_round_trip_eval_identical(self, trained, setup, tmp_path):
        cfg, ds, train_v, val_v, cands = setup
        out, _ = trained
        ck = tr.load_checkpoint(out / "model.ckpt", cands)
        r1, p1 = tr.evaluate(ck.model, ds.videos, cfg, ck.events, ck.event_kinds)
        tr.save_checkpoint(tmp_path / "again.ckpt", ck)
        ck2 = tr.load_checkpoint(tmp_path / "again.ckpt", cands)
        r2, p2 = tr.evaluate(ck2.model, ds.videos, cfg, ck2.events, ck2.event_kinds)
        assert r1.rows == r2.rows
        for a, b in zip(p1, p2):
            np.testing.assert_array_equal(a, b)
        np.testing.assert_array_equal(ck.horizons.lam.data, ck2.horizons.lam.data)
        assert ck2.optim.step == ck.optim.step

    def test_eval_twice_identical(self, trained, setup):
        cfg, ds, *_ = setup
        ck = tr.load_checkpoint(trained[0] / "model.ckpt")
        a, _ = tr.evaluate(ck.model, ds.videos, cfg, ck.events, ck.event_kinds)
        b, _ = tr.evaluate(ck.model, ds.videos, cfg, ck.events, ck.event_kinds)
        assert a.rows == b.rows

    def test_candidate_shape_mismatch_refused(self, trained):
        bad = CandidateGraphSet(8, [CandidateGraph(tuple([True] * 8), 1)])
        with pytest.raises(ConfigError, match="does not match"):
            tr.load_checkpoint(trained[0] / "model.ckpt", bad)

    def test_candidate_content_mismatch_refused(self, trained, setup):
        cands = setup[4]
        graphs = list(cands.graphs)
        graphs[0] = CandidateGraph(graphs[0].mask, graphs[0].frequency + 1)
        with pytest.raises(ConfigError, match="differs"):
            tr.load_checkpoint(trained[0] / "model.ckpt", CandidateGraphSet(cands.n_nodes, graphs))


class TestDumpReplay:
    def test_perfect_predictions_score_zero(self, setup, tmp_path):
        cfg, ds, *_ = setup
        truths = [tr.targets(v, cfg, ds.events) for v in ds.videos]
        preds = [np.where(np.isinf(y), 1e6, y) for y in truths]
        tr.write_prediction_dump(tmp_path / "p.csv", ds.videos, preds, truths, ds.events)
        back = tr.read_prediction_dump(tmp_path / "p.csv", ds.videos, ds.events)
        for a, b in zip(preds, back):
            np.testing.assert_array_equal(a, b)
        rep = tr.report_from_predictions(back, ds.videos, cfg, ds.events, ds.event_kinds)
        for r in rep.rows:
            for k in ("inMAE", "oMAE", "wMAE", "eMAE"):
                assert r[k] in (0.0, None)

    def test_incomplete_dump_rejected(self, setup, tmp_path):
        cfg, ds, *_ = setup
        v = ds.videos[:1]
        y = [tr.targets(v[0], cfg, ds.events)[:-1]]
        tr.write_prediction_dump(tmp_path / "p.csv", v, y, y, ds.events)
        with pytest.raises(ConfigError, match="lacks frames"):
            tr.read_prediction_dump(tmp_path / "p.csv", v, ds.events)


class TestRsdProfile:
    def test_trains_single_output(self, setup, tmp_path):
        _, ds, train_v, val_v, cands = setup
        cfg = small_config(profile="rsd", l_p=3, l_t=3, optimizer={"epochs": 1, "batch_size": 2})
        res = tr.train(cfg, train_v, val_v, cands, tmp_path, ds.events, epochs=1)
        ck = tr.load_checkpoint(res.checkpoint)
        assert ck.events == [tr.RSD_EVENT] and ck.model.dims.n_events == 1
        rows = read_log(tmp_path / "train_log.csv")
        assert "val_MAE_all" in rows[0] and "lambda_hat_inf" in rows[0]

    def test_aux_head_trains(self, setup, tmp_path):
        _, ds, train_v, val_v, cands = setup
        cfg = small_config(profile="rsd", aux_head=True, l_p=3, l_t=3)
        res = tr.train(cfg, train_v, val_v, cands, tmp_path, ds.events, epochs=1)
        assert np.isfinite(res.history[0]["loss"])
