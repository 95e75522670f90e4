import os

import numpy as np
import pandas as pd
import pytest

from cli import EXIT_INADMISSIBLE, EXIT_NONCONVERGENCE, EXIT_OK, EXIT_USAGE, main
from config import ConfigError, load_run_config
from mesh import load_off

SOLVE_TEMPLATE = """# clamped strip pulled along x
dim = 2
mesh = box:4x4
material = {material}
lambda = 1.2
mu = 0.8
mode = {mode}
tol_rel = 1e-10
max_iter = {max_iter}
dirichlet = {dirichlet}
out_prefix = {prefix}
"""

PULL = "1:1,0,0,1|0,0; 2:{s},0,0,1|0,0"


def write_config(tmp_path, name="run.cfg", material="svk", mode="monolithic", max_iter=30,
                 dirichlet=PULL.format(s=1.1), **overrides):
    prefix = str(tmp_path / "out")
    text = SOLVE_TEMPLATE.format(material=material, mode=mode, max_iter=max_iter,
                                 dirichlet=dirichlet, prefix=prefix)
    for key, value in overrides.items():
        text = text.replace(f"{key} = ", f"{key} = {value} # was ", 1)
    path = tmp_path / name
    path.write_text(text)
    return str(path), prefix


def test_mesh_command(tmp_path, capsys):
    out = str(tmp_path / "box.off")
    assert main(['mesh', '--dim', '2', '--div', '8x8', '--out', out]) == EXIT_OK
    assert capsys.readouterr().out.strip() == f"{out}: 81 vertices, 128 triangles"
    mesh = load_off(out)
    assert (mesh.num_vertices, mesh.num_elements) == (81, 128)

    out3 = str(tmp_path / "box.toff")
    assert main(['mesh', '--dim', '3', '--div', '2x2x2', '--bounds', '0,2,0,1,0,1', '--out', out3]) == EXIT_OK
    mesh = load_off(out3)
    assert (mesh.num_vertices, mesh.num_elements) == (27, 48)
    assert mesh.vertices[:, 0].max() == 2.0


def test_mesh_command_rejects_bad_divisions(tmp_path):
    assert main(['mesh', '--dim', '2', '--div', '8x8x8', '--out', str(tmp_path / "x.off")]) == EXIT_USAGE
    assert main(['mesh', '--dim', '4', '--div', '8x8']) == EXIT_USAGE


@pytest.mark.parametrize("material", ["svk", "neohookean"])
@pytest.mark.parametrize("mode", ["monolithic", "condensed"])
def test_solve_writes_artifacts(tmp_path, capsys, material, mode):
    config, prefix = write_config(tmp_path, material=material, mode=mode)
    assert main(['solve', config]) == EXIT_OK
    for suffix in (".vtk", "_cells.csv", "_history.csv", "_report.txt"):
        assert os.path.exists(prefix + suffix)
    history = pd.read_csv(prefix + "_history.csv")
    assert history['residual'].iloc[-1] < history['residual'].iloc[0]
    assert f"({mode}): converged" in capsys.readouterr().out


def test_malformed_value_names_key_and_line(tmp_path, capsys):
    config, _ = write_config(tmp_path, tol_rel="abc")
    assert main(['solve', config]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "'tol_rel'" in err and "line 8" in err


def test_unknown_and_missing_keys(tmp_path):
    config, _ = write_config(tmp_path)
    with open(config, 'a') as f:
        f.write("colour = blue\n")
    with pytest.raises(ConfigError) as info:
        load_run_config(config)
    assert info.value.key == 'colour' and info.value.line == 12
    assert main(['solve', config]) == EXIT_USAGE

    path = tmp_path / "short.cfg"
    path.write_text("dim = 2\n")
    with pytest.raises(ConfigError) as info:
        load_run_config(str(path))
    assert info.value.key == 'mesh'


def test_config_values(tmp_path):
    config, prefix = write_config(tmp_path, dirichlet="all:1,0.1,0,1|0,0.5")
    cfg = load_run_config(config)
    assert cfg['mesh'] == ('box', (4, 4))
    assert cfg['material'] == 'svk' and cfg['max_iter'] == 30
    spec = cfg['dirichlet'][0]
    assert spec.everywhere
    assert spec.apply(np.array([[1.0, 1.0]])) == pytest.approx(np.array([[1.1, 1.5]]))
    assert cfg.get('neumann') is None
    assert cfg.lines['dirichlet'] == 10


def test_missing_mesh_file_is_a_config_error(tmp_path, capsys):
    config, _ = write_config(tmp_path, mesh=str(tmp_path / "nowhere.off"))
    assert main(['solve', config]) == EXIT_USAGE
    err = capsys.readouterr().err
    assert "'mesh'" in err and "line 3" in err


def test_solve_is_deterministic_and_patch_exact(tmp_path):
    outputs = []
    for name in ("first", "second"):
        prefix = str(tmp_path / name)
        config, _ = write_config(tmp_path, name=f"{name}.cfg", dirichlet="all:1.1,0,0,1|0,0", out_prefix=prefix)
        assert main(['solve', config]) == EXIT_OK
        outputs.append(prefix)
    for suffix in (".vtk", "_cells.csv", "_history.csv", "_report.txt"):
        with open(outputs[0] + suffix, 'rb') as a, open(outputs[1] + suffix, 'rb') as b:
            assert a.read() == b.read(), suffix

    cells = pd.read_csv(outputs[0] + "_cells.csv")
    expected = {'theta_11': 1.1, 'theta_12': 0.0, 'theta_21': 0.0, 'theta_22': 1.0}
    for column, value in expected.items():
        assert np.max(np.abs(cells[column] - value)) <= 1e-9
    assert np.allclose(cells['J'], 1.1)


def test_young_and_poisson_replace_lame_constants(tmp_path, capsys):
    config, prefix = write_config(tmp_path)
    text = open(config).read().replace("lambda = 1.2\nmu = 0.8\n", "young = 2.0\npoisson = 0.25\n")
    with open(config, 'w') as f:
        f.write(text)
    cfg = load_run_config(config)
    assert (cfg['young'], cfg['poisson']) == (2.0, 0.25)
    assert main(['solve', config]) == EXIT_OK

    with open(config, 'a') as f:
        f.write("mu = 0.8\n")
    assert main(['solve', config]) == EXIT_USAGE
    assert "either lambda/mu or young/poisson" in capsys.readouterr().err

    path = tmp_path / "half.cfg"
    path.write_text(text.replace("poisson = 0.25\n", ""))
    with pytest.raises(ConfigError) as info:
        load_run_config(str(path))
    assert info.value.key == 'poisson'


def test_frames_twisted_3d(tmp_path, capsys):
    prefix = str(tmp_path / "twist")
    assert main(['frames', '--field', 'twist-3d', '--dim', '3', '--div', '8', '--out', prefix]) == EXIT_OK
    assert "twist-3d" in capsys.readouterr().out
    assert len(pd.read_csv(prefix + ".csv")) == 9 ** 3
    assert main(['frames', '--field', 'twist-3d', '--out', prefix]) == EXIT_USAGE


def test_forced_nonconvergence_exits_3_with_partial_history(tmp_path):
    config, prefix = write_config(tmp_path, material="neohookean", max_iter=1, dirichlet=PULL.format(s=1.3))
    assert main(['solve', config]) == EXIT_NONCONVERGENCE
    history = pd.read_csv(prefix + "_history.csv")
    assert len(history) == 2
    assert os.path.exists(prefix + ".vtk")


def test_inverted_boundary_data_exit_4(tmp_path):
    config, _ = write_config(tmp_path, dirichlet="all:-1,0,0,1|0,0")
    assert main(['solve', config]) == EXIT_INADMISSIBLE


def test_frames_cartesian(tmp_path, capsys):
    prefix = str(tmp_path / "cart")
    assert main(['frames', '--field', 'cartesian', '--div', '8', '--out', prefix]) == EXIT_OK
    assert "cartesian" in capsys.readouterr().out
    table = pd.read_csv(prefix + ".csv")
    assert len(table) == 81
    assert table['torsion'].abs().max() <= 1e-13
    assert os.path.exists(prefix + ".vtk")


def test_frames_refinement_from_config(tmp_path, capsys):
    prefix = str(tmp_path / "sphere")
    path = tmp_path / "frames.cfg"
    path.write_text(f"field = sphere\ndiv = 8\nrefine = 3\nout_prefix = {prefix}\n")
    assert main(['frames', '--config', str(path)]) == EXIT_OK
    out = capsys.readouterr().out
    assert "torsion slope" in out
    table = pd.read_csv(prefix + "_refinement.csv")
    assert table['divisions'].tolist() == [8, 16, 32]


def test_frames_unknown_field(tmp_path):
    assert main(['frames', '--field', 'torus', '--out', str(tmp_path / "t")]) == EXIT_USAGE


def test_bad_flags_are_usage_errors():
    assert main(['frames', '--div', 'many']) == EXIT_USAGE
    assert main(['explode']) == EXIT_USAGE


def test_check_is_deterministic(capsys):
    assert main(['check']) == EXIT_OK
    first = capsys.readouterr().out
    assert main(['check']) == EXIT_OK
    assert capsys.readouterr().out == first
    assert "All checks passed" in first


if __name__ == "__main__":
    print("🧪 CLI tests")
    raise SystemExit(pytest.main([__file__, "-v"]))
