import json
import math

import pytest

from pdectrl.cli import load_config, main
from pdectrl.dataset import read_header
from pdectrl.deeponet import DeepONetModel
from pdectrl.errors import ConfigError

TINY = """
[experiment]
benchmark = {benchmark}
seed = 1
out_dir = {out}

[env]
gamma = {gamma}

[dataset]
n_coeffs = 2
n_inits = 3

[deeponet]
latent = 8
branch_hidden = 16, 16
trunk_hidden = 8, 8
epochs = {epochs}
batch_size = 32

[sac]
total_steps = 150
warmup = 32
batch_size = 16
actor_hidden = 16, 16
critic_hidden = 16, 16

[eval]
gamma_eval = {gamma_eval}
u0 = {u0}
"""


def write_config(tmp_path, name="tiny.ini", benchmark="hyperbolic", gamma=5.5, epochs=1,
                 gamma_eval="5.5", u0="9", out=None, extra=""):
    out = out or tmp_path / "run"
    path = tmp_path / name
    path.write_text(TINY.format(benchmark=benchmark, gamma=gamma, epochs=epochs,
                                gamma_eval=gamma_eval, u0=u0, out=out) + extra)
    return path


def body(path):
    """File contents after the single timestamp line."""
    first, rest = path.read_text().split("\n", 1)
    assert first.startswith("# created ")
    return rest


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("pipeline")
    cfg = write_config(tmp, gamma_eval="5.5, 5.7")
    assert main(["gen-data", "--config", str(cfg)]) == 0
    assert main(["train-deeponet", "--config", str(cfg)]) == 0
    for variant in ("sac", "nosac", "nosac_training"):
        assert main(["train-rl", "--config", str(cfg), "--variant", variant]) == 0
    assert main(["evaluate", "--config", str(cfg)]) == 0
    return tmp, cfg, tmp / "run"


class TestConfig:
    def test_defaults_and_overrides(self, tmp_path):
        cfg = load_config(write_config(tmp_path), seed=7, out=str(tmp_path / "elsewhere"))
        assert cfg.seed == 7 and cfg.out_dir == tmp_path / "elsewhere"
        assert cfg.deeponet.branch_hidden == (16, 16)
        assert cfg.sac["actor_hidden"] == (16, 16)
        assert cfg.gamma_eval == (5.5,)
        plan = cfg.generation_plan()
        assert plan.n_samples == 2 * 3 * 100

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown key"):
            load_config(write_config(tmp_path, extra="[paths]\nnonsense = 1\n"))

    def test_committed_experiments_parse(self):
        from pathlib import Path
        configs = sorted(Path(__file__).resolve().parents[1].glob("experiments/*.ini"))
        assert configs
        for path in configs:
            load_config(path)


class TestExitCodes:
    def test_dry_run_writes_nothing(self, tmp_path, capsys):
        cfg = write_config(tmp_path)
        assert main(["gen-data", "--config", str(cfg), "--dry-run"]) == 0
        assert "planned rollouts: 6" in capsys.readouterr().out
        assert not (tmp_path / "run").exists()

    def test_inverted_gamma_range(self, tmp_path):
        cfg = write_config(tmp_path, extra="")
        text = cfg.read_text().replace("n_inits = 3", "n_inits = 3\ngamma_low = 7\ngamma_high = 6")
        cfg.write_text(text)
        assert main(["gen-data", "--config", str(cfg)]) == 2

    def test_missing_config(self, tmp_path):
        assert main(["gen-data", "--config", str(tmp_path / "none.ini")]) == 2

    def test_unknown_command(self, tmp_path):
        assert main(["bogus", "--config", "x"]) == 2

    def test_missing_dataset(self, tmp_path):
        assert main(["train-deeponet", "--config", str(write_config(tmp_path))]) == 2

    def test_nosac_training_needs_checkpoint(self, tmp_path, capsys):
        cfg = write_config(tmp_path, extra="")
        cfg.write_text(cfg.read_text().replace("[env]\n", "[env]\naction_bound = 10\n"))
        assert main(["train-rl", "--config", str(cfg), "--variant", "nosac_training"]) == 2
        assert "deeponet.ckpt" in capsys.readouterr().err

    def test_deeponet_simulation_needs_checkpoint(self, tmp_path):
        cfg = write_config(tmp_path)
        assert main(["simulate-backstepping", "--config", str(cfg), "--controller", "deeponet"]) == 2

    def test_evaluate_needs_agents(self, tmp_path):
        cfg = write_config(tmp_path)
        cfg.write_text(cfg.read_text().replace("[env]\n", "[env]\naction_bound = 10\n"))
        assert main(["evaluate", "--config", str(cfg)]) == 2


class TestPipeline:
    def test_generation_report(self, pipeline):
        _, _, run = pipeline
        report = body(run / "gen_report.txt")
        assert "total_samples = 600" in report and "train_samples = 540" in report
        header = read_header(run / "data" / "train.pdds")
        assert f"suggested_action_bound = {math.ceil(1.5 * header['max_abs_control'])}" in report

    def test_outputs_deterministic(self, pipeline, tmp_path):
        _, _, run = pipeline
        cfg = write_config(tmp_path, gamma_eval="5.5, 5.7", out=tmp_path / "again")
        assert main(["gen-data", "--config", str(cfg)]) == 0
        assert main(["train-deeponet", "--config", str(cfg)]) == 0
        assert main(["train-rl", "--config", str(cfg), "--variant", "nosac_training"]) == 0
        again = tmp_path / "again"
        for name in ("data/train.pdds", "data/test.pdds", "deeponet.ckpt",
                     "agents/nosac_training_seed1.ckpt"):
            assert (again / name).read_bytes() == (run / name).read_bytes(), name
        for name in ("gen_report.txt", "deeponet_epochs.csv", "metrics_nosac_training_seed1.csv"):
            assert body(again / name) == body(run / name), name

    def test_seed_changes_output(self, pipeline, tmp_path):
        _, cfg, run = pipeline
        assert main(["gen-data", "--config", str(cfg), "--seed", "2", "--out", str(tmp_path)]) == 0
        assert (tmp_path / "data/train.pdds").read_bytes() != (run / "data/train.pdds").read_bytes()

    def test_summary_covers_all_controllers(self, pipeline):
        _, _, run = pipeline
        summary = json.loads((run / "eval" / "summary.json").read_text())
        seen = {(r["controller"], r["gamma_eval"]) for r in summary["runs"]}
        assert len(seen) == 8
        for r in summary["runs"]:
            for key in ("overshoot", "steady_state_error", "total_effort"):
                assert math.isfinite(r[key])
        assert (run / "eval" / "traj_backstepping_g5p7_u9.csv").is_file()

    def test_matched_gamma_equals_nominal(self, pipeline, tmp_path):
        # the gamma_eval = gamma_train rows of a mismatch sweep equal a nominal-only run
        _, cfg, run = pipeline
        names = [f"traj_{c}_g5p5_u9.csv" for c in ("backstepping", "sac", "nosac", "nosac_training")]
        sweep = {n: body(run / "eval" / n) for n in names}
        nominal = tmp_path / "nominal.ini"
        nominal.write_text(cfg.read_text().replace("gamma_eval = 5.5, 5.7", "gamma_eval = 5.5"))
        assert main(["evaluate", "--config", str(nominal)]) == 0
        for n in names:
            assert body(run / "eval" / n) == sweep[n]

    def test_zero_epochs_keeps_initial_model(self, pipeline, tmp_path, capsys):
        _, _, run = pipeline
        cfg = write_config(tmp_path, epochs=0, out=tmp_path / "zero")
        (tmp_path / "zero" / "data").mkdir(parents=True)
        for name in ("train.pdds", "test.pdds"):
            (tmp_path / "zero" / "data" / name).write_bytes((run / "data" / name).read_bytes())
        assert main(["train-deeponet", "--config", str(cfg)]) == 0
        assert "held-out relative L2 error" in capsys.readouterr().out
        model = DeepONetModel.load(tmp_path / "zero" / "deeponet.ckpt")
        assert model.output_bias == 0.0

    def test_simulate_both_controllers(self, pipeline, tmp_path):
        _, cfg, run = pipeline
        kernel_csv = tmp_path / "kernel.csv"
        assert main(["simulate-backstepping", "--config", str(cfg), "--controller", "both",
                     "--dump-kernel", str(kernel_csv)]) == 0
        rows = body(run / "simulate_backstepping_u9.csv").splitlines()
        assert rows[0] == "t,control,l2_norm" and len(rows) == 102
        final_norm = float(rows[-1].split(",")[2])
        assert final_norm <= 0.01 * 9.0
        assert (run / "simulate_deeponet_u9.csv").is_file()
        assert len(kernel_csv.read_text().splitlines()) == 102

    def test_simulate_zero_initial_state(self, tmp_path):
        cfg = write_config(tmp_path, u0="0")
        assert main(["simulate-backstepping", "--config", str(cfg)]) == 0
        for line in body(tmp_path / "run" / "simulate_backstepping_u0.csv").splitlines()[1:]:
            _, control, norm = line.split(",")
            assert float(control) == 0.0 and float(norm) == 0.0
