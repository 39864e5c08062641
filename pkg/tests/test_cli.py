import json

import pytest

from mezofit.cli import main, parse_budget
from mezofit.configfile import PRESETS, parse_model_config, parse_plan, parse_zo_config
from mezofit.memory import (
    ConfigError,
    MemoryMode,
    ModelConfig,
    bp_memory,
    memory_for_mode,
    mezo_memory,
)

LLAMA_INI = "[model]\npreset = llama2-7b\n"

TINY_PLAN = """\
[model]
context_length = 6
num_layers = 1
hidden_dim = 8
num_heads = 2
vocab_size = 16
batch_size = 8

[mezo]
epsilon = 1e-3
num_perturbations = 2
master_seed = 5

[experiment]
task = next_token_synthetic
task_seed = 3
steps = 4
eval_every = 2
run_seed = 99
lr_grid_bp = 0.5
lr_grid_mezo = 1e-3
mezo_num_layers = 2
mezo_hidden_dim = 16
mezo_stored_layers = 0.2
"""


@pytest.fixture
def llama_config(tmp_path):
    p = tmp_path / "llama.ini"
    p.write_text(LLAMA_INI)
    return str(p)


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def test_preset_expands_and_overrides_apply():
    cfg = parse_model_config("[model]\npreset = llama2-7b\nnum_layers = 100\n",
                             is_text=True)
    assert cfg.num_layers == 100
    assert cfg.hidden_dim == 4096 and cfg.vocab_size == 32000


def test_presets_have_documented_values():
    assert PRESETS["llama2-7b"]["context_length"] == 2048
    assert PRESETS["gpt2-medium"] == dict(context_length=1024, num_layers=24,
                                          hidden_dim=1024, num_heads=16,
                                          vocab_size=50257, batch_size=1,
                                          bytes_per_param=2.0, stored_layers=1.0)


def test_unknown_keys_and_sections_rejected():
    with pytest.raises(ConfigError, match="unknown key 'hidden_dims'"):
        parse_model_config("[model]\npreset = llama2-7b\nhidden_dims = 4\n",
                           is_text=True)
    with pytest.raises(ConfigError, match=r"unknown section \[extra\]"):
        parse_model_config("[model]\npreset = llama2-7b\n[extra]\nx = 1\n",
                           is_text=True)
    with pytest.raises(ConfigError, match="unknown preset"):
        parse_model_config("[model]\npreset = llama3\n", is_text=True)
    with pytest.raises(ConfigError, match="must be an integer"):
        parse_model_config("[model]\npreset = llama2-7b\nnum_layers = ten\n",
                           is_text=True)


def test_zo_config_section():
    zo = parse_zo_config("[model]\npreset = llama2-7b\n[mezo]\nepsilon = 1e-4\n"
                         "num_perturbations = 3\n", is_text=True)
    assert zo.epsilon == 1e-4 and zo.num_perturbations == 3


def test_parse_plan_builds_both_models():
    plan = parse_plan(TINY_PLAN, is_text=True)
    assert plan.bp_model.hidden_dim == 8
    assert plan.mezo_model.hidden_dim == 16
    assert plan.mezo_model.num_layers == 2
    assert plan.task.vocab_size == 16
    assert plan.zo.num_perturbations == 2
    assert plan.lr_grid_bp == (0.5,)


def test_parse_plan_missing_key():
    broken = TINY_PLAN.replace("steps = 4\n", "")
    with pytest.raises(ConfigError, match="steps"):
        parse_plan(broken, is_text=True)


def test_parse_budget_suffixes():
    assert parse_budget("123") == 123.0
    assert parse_budget("80GB") == 80e9
    assert parse_budget("2GiB") == 2.0 * 2**30
    assert parse_budget("1.5 GiB") == 1.5 * 2**30
    with pytest.raises(ConfigError):
        parse_budget("12 kB")


# ---------------------------------------------------------------------------
# plan command
# ---------------------------------------------------------------------------

def test_cmd_plan_mezo_total(llama_config, capsys):
    assert main(["plan", "--config", llama_config, "--mode", "mezo", "--json"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["total_bytes"] == 14_365_491_200.0
    assert out["gradients_bytes"] == 0.0
    assert out["mode"] == "mezo"


def test_cmd_plan_bp_total(llama_config, capsys):
    assert main(["plan", "--config", llama_config, "--mode", "bp", "--json"]) == 0
    out = json.loads(capsys.readouterr().out)
    # sum of the hand-derived component values 25769803776 + 1048576000
    # + 30601641984
    assert out["total_bytes"] == 57_420_021_760.0


def test_cmd_plan_table_shows_both_units(llama_config, capsys):
    assert main(["plan", "--config", llama_config, "--mode", "bp"]) == 0
    out = capsys.readouterr().out
    assert "GiB" in out and "GB" in out and "total" in out


def test_cmd_plan_json_and_table_agree(llama_config, capsys):
    main(["plan", "--config", llama_config, "--mode", "bp-ckpt", "--json"])
    js = json.loads(capsys.readouterr().out)
    main(["plan", "--config", llama_config, "--mode", "bp-ckpt"])
    table = capsys.readouterr().out
    assert f"{js['total_bytes']:.1f}" in table


def test_cmd_plan_checkpointing_noop_single_layer(tmp_path, capsys):
    p = tmp_path / "one.ini"
    p.write_text("[model]\npreset = llama2-7b\nnum_layers = 1\n")
    main(["plan", "--config", str(p), "--mode", "bp", "--json"])
    plain = json.loads(capsys.readouterr().out)
    main(["plan", "--config", str(p), "--mode", "bp-ckpt", "--json"])
    ckpt = json.loads(capsys.readouterr().out)
    assert plain["total_bytes"] == ckpt["total_bytes"]


def test_cmd_plan_invalid_config_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.ini"
    p.write_text("[model]\npreset = llama2-7b\nbananas = 4\n")
    assert main(["plan", "--config", str(p), "--mode", "bp"]) == 2
    assert "bananas" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# sweep command
# ---------------------------------------------------------------------------

def test_cmd_sweep_context_axis(llama_config, tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--config", llama_config, "--axis", "n",
                 "--from", "1", "--to", "32768", "--points", "16",
                 "--out", str(out)]) == 0
    lines = out.read_text().strip().split("\n")
    assert lines[0] == "axis_value,m_bp,m_mezo,ratio"
    first = lines[1].split(",")
    last = lines[-1].split(",")
    assert int(first[0]) == 1 and int(last[0]) == 32768
    assert 20 <= float(last[3]) <= 32
    ratios = [float(l.split(",")[3]) for l in lines[1:]]
    assert ratios == sorted(ratios)


def test_cmd_sweep_hidden_dim_starts_at_24x(llama_config, capsys):
    assert main(["sweep", "--config", llama_config, "--axis", "d",
                 "--from", "512", "--to", "32768", "--points", "7"]) == 0
    rows = capsys.readouterr().out.strip().split("\n")[1:]
    first = rows[0].split(",")
    assert int(first[0]) == 512
    assert float(first[3]) == pytest.approx(23.8, abs=0.5)
    # hidden-dim values must stay divisible by the head count
    assert all(int(r.split(",")[0]) % 32 == 0 for r in rows)


def test_cmd_sweep_layers_checkpointed(llama_config, capsys):
    assert main(["sweep", "--config", llama_config, "--axis", "l",
                 "--from", "1", "--to", "100", "--points", "100", "--ckpt"]) == 0
    rows = capsys.readouterr().out.strip().split("\n")[1:]
    last = rows[-1].split(",")
    assert int(last[0]) == 100
    assert float(last[3]) == pytest.approx(2.18, abs=0.02)


def test_cmd_sweep_rejects_bad_range(llama_config, capsys):
    assert main(["sweep", "--config", llama_config, "--axis", "n",
                 "--from", "100", "--to", "10", "--points", "4"]) == 2


# ---------------------------------------------------------------------------
# solve command
# ---------------------------------------------------------------------------

def test_cmd_solve_fixed_point(llama_config, capsys):
    budget = repr(mezo_memory(ModelConfig(**PRESETS["llama2-7b"])).total_bytes)
    assert main(["solve", "--config", llama_config, "--budget", budget,
                 "--axis", "d", "--mode", "mezo", "--json"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["value"] == 4096


def test_cmd_solve_80gb_bp_matches_scan(llama_config, capsys):
    assert main(["solve", "--config", llama_config, "--budget", "80GB",
                 "--axis", "d", "--mode", "bp", "--json"]) == 0
    value = json.loads(capsys.readouterr().out)["value"]
    base = ModelConfig(**PRESETS["llama2-7b"])
    feasible = [d for d in range(32, 16384, 32)
                if bp_memory(base.replace(hidden_dim=d)).total_bytes <= 80e9]
    assert value == max(feasible)


def test_cmd_solve_infeasible_exit_3(llama_config, capsys):
    assert main(["solve", "--config", llama_config, "--budget", "1",
                 "--axis", "d", "--mode", "mezo"]) == 3
    assert "infeasible" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# train command
# ---------------------------------------------------------------------------

def test_cmd_train_tiny_plan(tmp_path, capsys):
    plan_path = tmp_path / "plan.ini"
    plan_path.write_text(TINY_PLAN)
    out_dir = tmp_path / "out"
    assert main(["train", "--plan", str(plan_path), "--out", str(out_dir)]) == 0
    records = (out_dir / "records.csv").read_text()
    assert records.startswith("method,learning_rate,step,")
    summary = json.loads((out_dir / "summary.json").read_text())
    assert set(summary["methods"]) == {"bp", "mezo"}


def test_cmd_train_deterministic_modulo_wall_clock(tmp_path):
    plan_path = tmp_path / "plan.ini"
    plan_path.write_text(TINY_PLAN)
    texts = []
    for d in ("a", "b"):
        out_dir = tmp_path / d
        assert main(["train", "--plan", str(plan_path), "--out", str(out_dir)]) == 0
        texts.append((out_dir / "records.csv").read_text())

    def strip_wall(text):
        rows = [r.split(",") for r in text.strip().split("\n")]
        for r in rows[1:]:
            r[3] = "walltime"
        return rows

    assert strip_wall(texts[0]) == strip_wall(texts[1])
    assert texts[0] != texts[1]  # wall clock actually differs


def test_cmd_train_steps_zero(tmp_path, capsys):
    plan_path = tmp_path / "plan.ini"
    plan_path.write_text(TINY_PLAN.replace("steps = 4", "steps = 0"))
    out_dir = tmp_path / "out"
    assert main(["train", "--plan", str(plan_path), "--out", str(out_dir)]) == 0
    rows = (out_dir / "records.csv").read_text().strip().split("\n")[1:]
    assert all(r.split(",")[2] == "0" for r in rows)


# ---------------------------------------------------------------------------
# verify command
# ---------------------------------------------------------------------------

def test_cmd_verify_rejects_zero_epsilon(capsys):
    assert main(["verify", "--epsilon", "0"]) == 2
    assert "epsilon" in capsys.readouterr().err


def test_cmd_verify_rejects_oversized_dim(capsys):
    assert main(["verify", "--dim", "5000"]) == 2
    assert "dim" in capsys.readouterr().err
