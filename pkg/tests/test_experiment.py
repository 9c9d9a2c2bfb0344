"""Experiment runner and CLI tests.

Everything here runs on deliberately tiny streams (two tasks, two classes
each, sixteen input dims) so the whole module stays in the seconds range.
CLI behavior is exercised in-process through cli.main(argv).
"""

import hashlib
import json
import os

import numpy as np
import pytest

from cpnslab import cli
from cpnslab import data as dt
from cpnslab import experiment as ex
from cpnslab import metrics as mt
from cpnslab import model as mdl
from cpnslab.errors import ConfigurationError, ParseError


def tiny_doc(out_dir, **overrides):
    doc = {
        "run_id": "t",
        "output_dir": str(out_dir),
        "seeds": [0],
        "data": {"kind": "synthetic", "num_tasks": 2, "classes_per_task": 2,
                 "d_c": 2, "d_s": 4, "d_mc": 1, "input_dim": 16,
                 "n_train_per_class": 30, "n_test_per_class": 15},
        "model": {"feature_dim": 8, "hidden_dims": [16]},
        "train": {"stage1_epochs": 2, "stage2_epochs": 3, "batch_size": 16,
                  "buffer_capacity": 40, "report_limit": 64},
        "metrics": {"probe_limit": 16},
    }
    doc.update(overrides)
    return doc


def write_config(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


def sha(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


# ---------------------------------------------------------------------------
# config parsing and validation


class TestConfigValidation:
    def test_minimal_document_parses(self, tmp_path):
        cfg = ex.config_from_dict(tiny_doc(tmp_path))
        assert cfg.seeds == (0,)
        assert cfg.scenario.startswith("scm-2x2")

    def test_unknown_top_level_key(self, tmp_path):
        doc = tiny_doc(tmp_path, mystery=1)
        with pytest.raises(ConfigurationError, match="mystery"):
            ex.config_from_dict(doc)

    def test_unknown_train_key(self, tmp_path):
        doc = tiny_doc(tmp_path)
        doc["train"]["learning_rate"] = 0.1
        with pytest.raises(ConfigurationError, match="learning_rate"):
            ex.config_from_dict(doc)

    def test_unknown_gen_key(self, tmp_path):
        doc = tiny_doc(tmp_path)
        doc["train"]["gen"] = {"alpha": 1.0, "zeta": 2.0}
        with pytest.raises(ConfigurationError, match="zeta"):
            ex.config_from_dict(doc)

    def test_missing_data_section(self, tmp_path):
        doc = tiny_doc(tmp_path)
        del doc["data"]
        with pytest.raises(ConfigurationError, match="data"):
            ex.config_from_dict(doc)

    def test_bad_data_kind(self, tmp_path):
        doc = tiny_doc(tmp_path)
        doc["data"] = {"kind": "parquet"}
        with pytest.raises(ConfigurationError, match="kind"):
            ex.config_from_dict(doc)

    def test_empty_seed_list(self, tmp_path):
        doc = tiny_doc(tmp_path, seeds=[])
        with pytest.raises(ConfigurationError, match="seed"):
            ex.config_from_dict(doc)

    def test_table_path_must_exist(self, tmp_path):
        doc = tiny_doc(tmp_path)
        doc["data"] = {"kind": "table", "path": str(tmp_path / "no.txt"),
                       "B": 2, "I": 2}
        with pytest.raises(ConfigurationError, match="exist"):
            ex.config_from_dict(doc)

    def test_invalid_json_file(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")
        with pytest.raises(ParseError):
            ex.load_config(str(path))

    def test_missing_config_file(self, tmp_path):
        with pytest.raises(ConfigurationError, match="cannot read"):
            ex.load_config(str(tmp_path / "absent.json"))

    def test_bad_synthetic_field_propagates(self, tmp_path):
        doc = tiny_doc(tmp_path)
        doc["data"]["overlap"] = 1.5
        with pytest.raises(ConfigurationError):
            ex.config_from_dict(doc)


# ---------------------------------------------------------------------------
# the incremental loop


class TestRunSeed:
    def test_two_task_run_produces_expected_artifacts(self, tmp_path):
        cfg = ex.config_from_dict(tiny_doc(tmp_path))
        rows = ex.run_experiment(cfg)
        assert len(rows) == 1
        seed_dir = tmp_path / "t" / "seed-0"
        names = sorted(os.listdir(seed_dir))
        assert names == ["epochs.jsonl", "summary.csv", "task-0.ckpt",
                         "task-0.eval.json", "task-1.ckpt",
                         "task-1.eval.json"]

    def test_eval_records_parse_and_validate(self, tmp_path):
        cfg = ex.config_from_dict(tiny_doc(tmp_path))
        ex.run_experiment(cfg)
        for t in (0, 1):
            with open(tmp_path / "t" / f"seed-{t and 0}" / f"task-{t}.eval.json") as fh:
                doc = json.load(fh)
            record = mt.EvalRecord.from_json_dict(doc)
            assert record.task_index == t
            assert len(record.per_task_acc) == t + 1
        assert record.cka_by_layer is not None
        assert record.old_new_errors is not None
        assert record.masking_curve is not None
        assert record.cf_quality is not None

    def test_summary_header_exact(self, tmp_path):
        cfg = ex.config_from_dict(tiny_doc(tmp_path))
        ex.run_experiment(cfg)
        for rel in ("t/summary.csv", "t/seed-0/summary.csv"):
            lines = (tmp_path / rel).read_text().splitlines()
            assert lines[0] == "method,scenario,seed,last,avg"

    def test_rerun_is_byte_identical_outside_epoch_log(self, tmp_path):
        cfg_path = write_config(tmp_path, tiny_doc(tmp_path / "out"))
        ex.run_experiment(ex.load_config(cfg_path))
        seed_dir = tmp_path / "out" / "t" / "seed-0"
        stable = [n for n in sorted(os.listdir(seed_dir))
                  if n != "epochs.jsonl"]
        before = {n: sha(seed_dir / n) for n in stable}
        ex.run_experiment(ex.load_config(cfg_path))
        after = {n: sha(seed_dir / n) for n in stable}
        assert before == after

    def test_epoch_log_stable_modulo_wall_times(self, tmp_path):
        cfg = ex.config_from_dict(tiny_doc(tmp_path))
        ex.run_experiment(cfg)
        log = tmp_path / "t" / "seed-0" / "epochs.jsonl"
        first = [json.loads(l) for l in log.read_text().splitlines()]
        ex.run_experiment(cfg)
        second = [json.loads(l) for l in log.read_text().splitlines()]
        assert len(first) == len(second)
        for a, b in zip(first, second):
            a.pop("wall_ms")
            b.pop("wall_ms")
            assert a == b

    def test_checkpoint_agrees_with_recorded_accuracy(self, tmp_path):
        cfg = ex.config_from_dict(tiny_doc(tmp_path))
        ex.run_experiment(cfg)
        model = mdl.load_checkpoint(str(tmp_path / "t" / "seed-0" / "task-1.ckpt"))
        stream = cfg.build_stream(0)
        hits = total = 0
        for _, (x, y), _ in stream.tasks:
            pred = np.argmax(model.forward_concat_np(x), axis=1)
            hits += int(np.sum(pred == y))
            total += len(y)
        with open(tmp_path / "t" / "seed-0" / "task-1.eval.json") as fh:
            record = mt.EvalRecord.from_json_dict(json.load(fh))
        assert hits / total == record.last_acc

    def test_distinct_seeds_produce_distinct_streams(self, tmp_path):
        cfg = ex.config_from_dict(tiny_doc(tmp_path, seeds=[0, 1]))
        rows = ex.run_experiment(cfg)
        assert [r["seed"] for r in rows] == [0, 1]
        a = cfg.build_stream(0).tasks[0][0][0]
        b = cfg.build_stream(1).tasks[0][0][0]
        assert not np.array_equal(a, b)

    def test_zeroed_knobs_match_baseline_trainer_summary(self, tmp_path):
        zero_train = {"stage1_epochs": 0, "stage2_epochs": 5,
                      "batch_size": 16, "buffer_capacity": 40,
                      "lam": 0.0, "gamma": 0.0, "nu": 0.0,
                      "report_limit": 64}
        doc_a = tiny_doc(tmp_path / "a", train=zero_train)
        doc_b = tiny_doc(tmp_path / "b", train=dict(zero_train),
                         use_baseline_trainer=True)
        ex.run_experiment(ex.config_from_dict(doc_a))
        ex.run_experiment(ex.config_from_dict(doc_b))
        csv_a = (tmp_path / "a" / "t" / "summary.csv").read_bytes()
        csv_b = (tmp_path / "b" / "t" / "summary.csv").read_bytes()
        assert csv_a == csv_b

    def test_table_backed_stream(self, tmp_path):
        rng = np.random.default_rng(3)
        n, d, C = 240, 12, 6
        y = np.repeat(np.arange(C), n // C)
        centers = rng.normal(scale=4.0, size=(C, d))
        x = centers[y] + rng.normal(size=(n, d))
        table_path = tmp_path / "tab.txt"
        dt.save_table(str(table_path), x, y.astype(np.int64), C)
        doc = tiny_doc(tmp_path)
        doc["data"] = {"kind": "table", "path": str(table_path),
                       "B": 2, "I": 2}
        doc["metrics"] = {"probe_limit": 8}
        rows = ex.run_experiment(ex.config_from_dict(doc))
        assert rows[0]["scenario"] == "tab.txt-B2-I2"
        assert 0.0 <= rows[0]["last"] <= 1.0


# ---------------------------------------------------------------------------
# sweeps and ablations


class TestSweepAndAblate:
    def test_sweep_produces_one_row_per_value(self, tmp_path):
        cfg = ex.config_from_dict(tiny_doc(tmp_path))
        ex.run_sweep(cfg, "beta", [0.01, 0.05, 0.1])
        lines = (tmp_path / "t" / "sweep-beta.csv").read_text().splitlines()
        assert lines[0] == "value,last,avg"
        assert len(lines) == 4

    def test_single_value_sweep_matches_run(self, tmp_path):
        cfg = ex.config_from_dict(tiny_doc(tmp_path))
        rows = ex.run_experiment(cfg)
        sweep = ex.run_sweep(cfg, "beta", [0.03])  # the config's own value
        assert sweep[0][1] == rows[0]["last"]
        assert sweep[0][2] == rows[0]["avg"]

    def test_unknown_sweep_parameter(self, tmp_path):
        cfg = ex.config_from_dict(tiny_doc(tmp_path))
        with pytest.raises(ConfigurationError, match="sweep parameter"):
            ex.run_sweep(cfg, "mu", [0.1])

    def test_sweep_values_reach_the_trainer(self, tmp_path):
        cfg = ex.config_from_dict(tiny_doc(tmp_path))
        assert ex._with_param(cfg, "lambda", 0.9).train.lam == 0.9
        assert ex._with_param(cfg, "nu", 0.25).train.nu == 0.25
        assert ex._with_param(cfg, "gamma", 2.0).train.gamma == 2.0
        assert ex._with_param(cfg, "alpha", 0.5).train.gen.alpha == 0.5
        assert ex._with_param(cfg, "beta", 0.08).train.gen.beta == 0.08
        assert ex._with_param(cfg, "epsilon", 0.2).train.gen.epsilon == 0.2

    def test_ablation_emits_exactly_six_method_rows(self, tmp_path):
        cfg = ex.config_from_dict(tiny_doc(tmp_path))
        table = ex.run_ablation(cfg)
        lines = (tmp_path / "t" / "ablation.csv").read_text().splitlines()
        assert lines[0] == "method,scenario,seed,last,avg"
        methods = [l.split(",")[0] for l in lines[1:]]
        assert methods == list(ex.ABLATION_VARIANTS)
        assert len(table) == 6

    def test_ablation_variant_knobs(self):
        from cpnslab.trainer import TrainConfig
        base = TrainConfig(stage1_epochs=4, stage2_epochs=6, lam=0.7,
                           gamma=0.5, nu=0.3)
        b = ex.ablation_train_config(base, "baseline")
        assert (b.lam, b.gamma, b.nu, b.stage1_epochs) == (0, 0, 0, 0)
        intra = ex.ablation_train_config(base, "+intra")
        assert intra.lam == 0.0 and intra.nu == 0.3 and intra.two_stage
        i1 = ex.ablation_train_config(base, "+inter_no2stage")
        assert i1.nu == 0.0 and i1.gamma == 0.0 and not i1.two_stage
        i2 = ex.ablation_train_config(base, "+inter_2stage")
        assert i2.nu == 0.0 and i2.lam == 0.7 and i2.two_stage
        both = ex.ablation_train_config(base, "both_no2stage")
        assert both.lam == 0.7 and both.nu == 0.3 and not both.two_stage
        full = ex.ablation_train_config(base, "full")
        assert full.lam == 0.7 and full.two_stage
        with pytest.raises(ConfigurationError):
            ex.ablation_train_config(base, "everything")


# ---------------------------------------------------------------------------
# CLI


class TestCli:
    def test_run_exit_zero(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, tiny_doc(tmp_path / "out"))
        assert cli.main(["run", cfg_path]) == 0
        assert "summary.csv" in capsys.readouterr().out

    def test_bad_config_exits_two(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, tiny_doc(tmp_path, seeds=[]))
        assert cli.main(["run", cfg_path]) == 2
        assert "seed" in capsys.readouterr().err

    def test_missing_config_exits_two(self, tmp_path):
        assert cli.main(["run", str(tmp_path / "nope.json")]) == 2

    def test_unknown_sweep_param_exits_two(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, tiny_doc(tmp_path / "out"))
        rc = cli.main(["sweep", cfg_path, "--param", "mu", "--values", "1"])
        assert rc == 2

    def test_bad_sweep_values_exit_two(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, tiny_doc(tmp_path / "out"))
        rc = cli.main(["sweep", cfg_path, "--param", "beta",
                       "--values", "0.1,zap"])
        assert rc == 2
        assert "zap" in capsys.readouterr().err

    def test_out_flag_overrides_config(self, tmp_path):
        cfg_path = write_config(tmp_path, tiny_doc(tmp_path / "ignored"))
        target = tmp_path / "flagged"
        assert cli.main(["run", cfg_path, "--out", str(target)]) == 0
        assert (target / "t" / "summary.csv").exists()
        assert not (tmp_path / "ignored").exists()

    def test_seed_flag_replaces_seed_list(self, tmp_path):
        cfg_path = write_config(tmp_path,
                                tiny_doc(tmp_path / "out", seeds=[0, 1, 2]))
        assert cli.main(["run", cfg_path, "--seed", "7"]) == 0
        lines = (tmp_path / "out" / "t" / "summary.csv").read_text().splitlines()
        assert len(lines) == 2
        assert lines[1].split(",")[2] == "7"

    def test_env_out_override(self, tmp_path, monkeypatch):
        cfg_path = write_config(tmp_path, tiny_doc(tmp_path / "ignored"))
        target = tmp_path / "enved"
        monkeypatch.setenv("CPNSLAB_OUT", str(target))
        assert cli.main(["run", cfg_path]) == 0
        assert (target / "t" / "summary.csv").exists()

    def test_flag_beats_env_for_output(self, tmp_path, monkeypatch):
        cfg_path = write_config(tmp_path, tiny_doc(tmp_path / "ignored"))
        monkeypatch.setenv("CPNSLAB_OUT", str(tmp_path / "from_env"))
        target = tmp_path / "from_flag"
        assert cli.main(["run", cfg_path, "--out", str(target)]) == 0
        assert (target / "t" / "summary.csv").exists()
        assert not (tmp_path / "from_env").exists()

    def test_threads_flag_pins_env(self, tmp_path, monkeypatch):
        for var in cli._THREAD_VARS:
            monkeypatch.delenv(var, raising=False)
        cfg_path = write_config(tmp_path, tiny_doc(tmp_path / "out"))
        assert cli.main(["run", cfg_path, "--threads", "1"]) == 0
        assert os.environ["OMP_NUM_THREADS"] == "1"

    def test_threads_env_var(self, tmp_path, monkeypatch):
        monkeypatch.setenv("CPNSLAB_THREADS", "2")
        cfg_path = write_config(tmp_path, tiny_doc(tmp_path / "out"))
        assert cli.main(["run", cfg_path]) == 0
        assert os.environ["MKL_NUM_THREADS"] == "2"

    def test_nonpositive_threads_exit_two(self, tmp_path):
        cfg_path = write_config(tmp_path, tiny_doc(tmp_path / "out"))
        assert cli.main(["run", cfg_path, "--threads", "0"]) == 2

    def test_eval_prints_accuracy_json(self, tmp_path, capsys):
        doc = tiny_doc(tmp_path / "out")
        cfg = ex.config_from_dict(doc)
        ex.run_experiment(cfg)
        stream = cfg.build_stream(0)
        xs = np.concatenate([x for _, (x, _), _ in stream.tasks])
        ys = np.concatenate([y for _, (_, y), _ in stream.tasks])
        table_path = tmp_path / "eval.txt"
        dt.save_table(str(table_path), xs, ys, int(ys.max()) + 1)
        ckpt = tmp_path / "out" / "t" / "seed-0" / "task-1.ckpt"
        assert cli.main(["eval", str(ckpt), str(table_path)]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert set(doc) >= {"accuracy", "n_samples"}
        assert doc["n_samples"] == len(ys)

    def test_eval_missing_checkpoint_exits_two(self, tmp_path):
        assert cli.main(["eval", str(tmp_path / "no.ckpt"),
                         str(tmp_path / "no.txt")]) == 2

    def test_ablate_writes_six_rows(self, tmp_path, capsys):
        cfg_path = write_config(tmp_path, tiny_doc(tmp_path / "out"))
        assert cli.main(["ablate", cfg_path]) == 0
        lines = (tmp_path / "out" / "t" / "ablation.csv").read_text().splitlines()
        assert len(lines) == 7
