import pytest
from click.testing import CliRunner
from lisco.cli import cli
from lisco.errors import DivergenceError, ExperimentError
from lisco.nn import load_weights, mlp_init, save_weights
from lisco.problems import ProblemKind, gen_instance, load_instance, save_instance
import json
from unittest.mock import patch
import pandas as pd


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def mock_config_file(tmp_path):
    config = {
        "_comment": "tiny test experiment",
        "n_y": 4,
        "n_h": 1,
        "n_g": 2,
        "instance_seeds": [0],
        "n_test": 2,
        "out_dir": str(tmp_path / "test_results"),
    }
    config_file = tmp_path / "test_config.json"
    with open(config_file, "w") as f:
        json.dump(config, f)
    return str(config_file)


@pytest.fixture
def instance_file(tmp_path):
    inst = gen_instance(ProblemKind.CONVEX_QP, 6, 2, 4, seed=3)
    return str(save_instance(inst, tmp_path / "instance.json"))


@pytest.fixture
def solver_file(tmp_path):
    params = mlp_init(12 + 1 + 2, 8, 12, seed=1)
    return str(save_weights(params, tmp_path / "solver.json", "solver"))


def test_cli_help(runner):
    result = runner.invoke(cli, ['--help'])
    assert result.exit_code == 0
    assert 'LISCO: learned iterative solver for constrained optimization' in result.output
    assert 'Usage:' in result.output
    for command in ('config', 'gen', 'oracle', 'train-predictor', 'train-solver', 'solve', 'bench', 'summary'):
        assert command in result.output


def test_config_command_creates_file(runner):
    with runner.isolated_filesystem():
        result = runner.invoke(cli, ['config'])
        assert result.exit_code == 0
        assert "Configuration file created: config.json" in result.output
        with open('config.json') as f:
            data = json.load(f)
    assert data["n_y"] == 20
    assert data["solver"]["lr"] == 1e-4
    assert "_comment" in data


def test_config_command_paper_preset(runner):
    with runner.isolated_filesystem():
        result = runner.invoke(cli, ['config', '--paper', '--output', 'paper.json'])
        assert result.exit_code == 0
        with open('paper.json') as f:
            data = json.load(f)
    assert (data["n_y"], data["n_h"], data["n_g"]) == (100, 50, 50)


def test_config_command_asks_before_overwrite(runner):
    with runner.isolated_filesystem():
        with open('config.json', 'w') as f:
            f.write('{}')
        result = runner.invoke(cli, ['config'], input='n\n')
        assert result.exit_code != 0
        with open('config.json') as f:
            assert f.read() == '{}'

        result = runner.invoke(cli, ['config'], input='y\n')
        assert result.exit_code == 0
        with open('config.json') as f:
            assert json.load(f)["n_test"] == 200


def test_gen_command(runner, mock_config_file, tmp_path):
    out = tmp_path / "nonconvex.json"
    result = runner.invoke(cli, ['gen', '--kind', 'nonconvex_qp', '--config', mock_config_file,
                                 '--seed', '5', '--out', str(out)])
    assert result.exit_code == 0, result.output
    inst = load_instance(out)
    assert inst.kind == ProblemKind.NONCONVEX_QP
    assert (inst.n_y, inst.n_h, inst.n_g) == (4, 1, 2)


def test_oracle_command(runner, mock_config_file, instance_file, tmp_path):
    out = tmp_path / "oracle"
    result = runner.invoke(cli, ['oracle', '--instance', instance_file, '--config', mock_config_file,
                                 '--out', str(out)])
    assert result.exit_code == 0, result.output
    assert 'converged' in result.output
    assert (out / "oracle_cache.jsonl").exists()


@pytest.fixture
def training_config_file(tmp_path):
    config = {
        "predictor": {"batch_size": 8, "hidden_dim": 4, "max_epochs": 3},
        "solver": {"batch_size": 8, "hidden_dim": 4, "total_steps": 3, "warmup_delay": 1},
    }
    config_file = tmp_path / "training.json"
    config_file.write_text(json.dumps(config))
    return str(config_file)


def test_train_predictor_and_solver_commands(runner, instance_file, training_config_file, tmp_path):
    predictor_out = tmp_path / "predictor.json"
    result = runner.invoke(cli, ['train-predictor', '--instance', instance_file, '--config', training_config_file,
                                 '--seed', '4', '--out', str(predictor_out)])
    assert result.exit_code == 0, result.output
    assert "Predictor weights written to" in result.output
    assert predictor_out.exists()
    assert (tmp_path / "history_predictor.csv").exists()

    solver_out = tmp_path / "solver_trained.json"
    result = runner.invoke(cli, ['train-solver', '--instance', instance_file, '--predictor', str(predictor_out),
                                 '--config', training_config_file, '--out', str(solver_out)])
    assert result.exit_code == 0, result.output
    assert "Solver weights written to" in result.output
    params, _ = load_weights(solver_out, "solver")
    assert params.w2.shape[0] == 12
    history = pd.read_csv(tmp_path / "history_solver_trained.csv")
    assert len(history) > 0


def test_train_solver_command_rejects_solver_file_as_predictor(runner, instance_file, solver_file,
                                                               training_config_file, tmp_path):
    result = runner.invoke(cli, ['train-solver', '--instance', instance_file, '--predictor', solver_file,
                                 '--config', training_config_file, '--out', str(tmp_path / "out.json")])
    assert result.exit_code == 2


def test_bench_command_without_config_uses_desk_preset(runner):
    with patch('lisco.cli.LiscoBenchmark') as mock_benchmark:
        mock_benchmark.return_value.run_benchmark.return_value = pd.DataFrame(
            {'method': ['predictor'], 'metric': ['success_rate'], 'mean': [0.0], 'std': [0.0]})
        result = runner.invoke(cli, ['bench'])
    assert result.exit_code == 0, result.output
    cfg = mock_benchmark.call_args.args[0]
    assert cfg.n_y == 20 and cfg.n_test == 200


def test_bench_command_paper_preset(runner):
    with patch('lisco.cli.LiscoBenchmark') as mock_benchmark:
        mock_benchmark.return_value.run_benchmark.return_value = pd.DataFrame(
            {'method': ['predictor'], 'metric': ['success_rate'], 'mean': [0.0], 'std': [0.0]})
        result = runner.invoke(cli, ['bench', '--paper'])
    assert result.exit_code == 0, result.output
    cfg = mock_benchmark.call_args.args[0]
    assert (cfg.n_y, cfg.n_h, cfg.n_g, cfg.n_test) == (100, 50, 50, 1000)
    assert cfg.solver.hidden_dim == 2048


@patch('lisco.cli.LiscoBenchmark')
def test_bench_command_with_config(mock_benchmark, runner, mock_config_file, tmp_path):
    mock_benchmark.return_value.run_benchmark.return_value = pd.DataFrame({
        'method': ['predictor', 'lisco_with_predictor'],
        'metric': ['success_rate', 'success_rate'],
        'mean': [0.0, 0.95],
        'std': [0.0, 0.01],
    })
    out = str(tmp_path / "results")
    result = runner.invoke(cli, ['bench', '--config', mock_config_file, '--seed', '3', '--out', out])

    assert result.exit_code == 0, f"Command failed with error: {result.output}"
    cfg = mock_benchmark.call_args.args[0]
    assert cfg.n_test == 2
    assert cfg.instance_seeds == [3]
    assert cfg.solver.seed == 3
    assert mock_benchmark.call_args.kwargs['output_dir'] == out
    mock_benchmark.return_value.run_benchmark.assert_called_once()
    assert 'success_rate' in result.output
    assert "Benchmark completed successfully !!" in result.output


def test_bench_command_with_invalid_config(runner, tmp_path):
    config_file = tmp_path / "bad_config.json"
    config_file.write_text(json.dumps({"n_test": 0}))
    result = runner.invoke(cli, ['bench', '--config', str(config_file)])
    assert result.exit_code == 2
    assert 'n_test' in result.output


def test_bench_command_with_unknown_key(runner, tmp_path):
    config_file = tmp_path / "bad_config.json"
    config_file.write_text(json.dumps({"n_constraints": 5}))
    result = runner.invoke(cli, ['bench', '--config', str(config_file)])
    assert result.exit_code == 2
    assert 'n_constraints' in result.output


@patch('lisco.cli.LiscoBenchmark')
def test_bench_command_numerical_failure(mock_benchmark, runner, mock_config_file):
    mock_benchmark.return_value.run_benchmark.side_effect = ExperimentError(
        "instance 0: train solver", DivergenceError("loss became NaN"))
    result = runner.invoke(cli, ['bench', '--config', mock_config_file])
    assert result.exit_code == 3
    assert "train solver" in result.output


def test_solve_command(runner, instance_file, solver_file, tmp_path):
    out = tmp_path / "report.json"
    result = runner.invoke(cli, ['solve', '--instance', instance_file, '--weights', solver_file,
                                 '--x', '0.1,-0.2', '--out', str(out)])
    assert result.exit_code == 0, result.output
    assert 'iterations' in result.output
    assert 'y = ' in result.output
    with open(out) as f:
        report = json.load(f)
    assert len(report["z_final"]) == 12


def test_solve_command_with_x_file(runner, instance_file, solver_file, tmp_path):
    x_file = tmp_path / "x.json"
    x_file.write_text(json.dumps([0.3, 0.4]))
    result = runner.invoke(cli, ['solve', '--instance', instance_file, '--weights', solver_file,
                                 '--x-file', str(x_file)])
    assert result.exit_code == 0, result.output


def test_solve_command_wrong_parameter_length(runner, instance_file, solver_file):
    result = runner.invoke(cli, ['solve', '--instance', instance_file, '--weights', solver_file, '--x', '0.1'])
    assert result.exit_code == 2
    assert 'expects (2,)' in result.output


def test_solve_command_without_parameters(runner, instance_file, solver_file):
    result = runner.invoke(cli, ['solve', '--instance', instance_file, '--weights', solver_file])
    assert result.exit_code == 2
    assert '--x' in result.output


def test_solve_command_rejects_wrong_weight_role(runner, instance_file, solver_file):
    result = runner.invoke(cli, ['solve', '--instance', instance_file, '--weights', solver_file,
                                 '--predictor', solver_file, '--x', '0.1,0.2'])
    assert result.exit_code == 2


def test_summary_command_without_results_dir(runner):
    result = runner.invoke(cli, ['summary'])
    assert result.exit_code != 0
    assert 'Error: Missing option \'--results-dir\'' in result.output


def test_summary_command_with_invalid_results_dir(runner):
    result = runner.invoke(cli, ['summary', '--results-dir', '/non/existent/path'])
    assert result.exit_code != 0
    assert 'Error: Invalid value for \'--results-dir\'' in result.output


def test_summary_command_without_summary_file(runner, tmp_path):
    result = runner.invoke(cli, ['summary', '--results-dir', str(tmp_path)])
    assert result.exit_code == 2
    assert 'lisco bench' in result.output


def test_summary_command_with_results_dir(runner, tmp_path):
    results_dir = tmp_path / "test_results"
    results_dir.mkdir()
    pd.DataFrame({
        'method': ['lisco_with_predictor'],
        'metric': ['success_rate'],
        'mean': [0.97],
        'std': [0.02],
    }).to_csv(results_dir / "summary.csv", index=False)

    result = runner.invoke(cli, ['summary', '--results-dir', str(results_dir)])

    assert result.exit_code == 0
    assert 'lisco_with_predictor' in result.output
    assert '0.97' in result.output
