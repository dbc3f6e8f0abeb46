from pathlib import Path

import pytest

from patchlab.models.enums import FeatureTier, TrainingMethod
from patchlab.utils.config_file import ConfigParseError, load_config, parse_config, serialize_config

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"

BASE = """\
[data]
d = 40
n = 12
P = 3
K = 2
tiers = common, rare
rho = 0.75, 0.25
sigma_d = 0.25
sigma_b = 0.15
alpha = 0.05

[model]
beta = 0.1
init_seed = 4

[train.cutout]
C = 1
T = 10
"""


def _line_of(text: str, needle: str) -> int:
    for lineno, line in enumerate(text.splitlines(), start=1):
        if line.startswith(needle):
            return lineno
    raise AssertionError(needle)


@pytest.mark.parametrize("name", sorted(p.name for p in CONFIG_DIR.glob("*.cfg")))
def test_bundled_configs_parse(name):
    config = load_config(CONFIG_DIR / name)
    assert config.train
    assert parse_config(serialize_config(config)) == config


def test_figure1_values():
    config = load_config(CONFIG_DIR / "figure1.cfg")
    assert (config.data.d, config.data.n, config.data.P, config.data.K) == (2000, 300, 3, 3)
    assert config.data.tiers == [FeatureTier.COMMON, FeatureTier.RARE, FeatureTier.EXTREME]
    assert config.data.rho == [0.8, 0.15, 0.05]
    assert config.model.activation.beta == 0.1
    assert config.model.init.seed == 1
    assert [t.method for t in config.train] == list(TrainingMethod)
    assert config.trainer(TrainingMethod.CUTMIX).grad_tol == 0.0001
    assert config.trainer(TrainingMethod.ERM).grad_tol is None
    assert config.eval.trace_test_samples == 2000


def test_minimal_config_uses_defaults():
    config = parse_config(BASE)
    assert config.model.m == 1
    assert config.model.init.sigma_0 == 0.01
    assert config.model.init.seed == 4
    assert config.trainer(TrainingMethod.ERM) is None
    assert config.output.plots is True


def test_with_seed_derives_every_seed():
    config = parse_config(BASE).with_seed(7)
    assert config.data.seed == 7
    assert config.model.init.seed == 8
    assert config.eval.seed == 9


@pytest.mark.parametrize(
    "old,new,needle,key",
    [
        ("d = 40", "d = -5", "d = -5", "d"),
        ("rho = 0.75, 0.25", "rho = 0.75, 0.2", "rho", "rho"),
        ("beta = 0.1", "beta = 2", "beta", "beta"),
        ("init_seed = 4", "init_seed = -1", "init_seed", "init_seed"),
        ("C = 1", "C = 2", "C = 2", "C"),
        ("T = 10", "T = many", "T = many", "T"),
    ],
)
def test_validation_errors_point_at_the_key(old, new, needle, key):
    text = BASE.replace(old, new)
    with pytest.raises(ConfigParseError) as excinfo:
        parse_config(text)
    assert excinfo.value.line == _line_of(text, needle)
    assert excinfo.value.key == key
    assert str(excinfo.value).startswith(f"line {excinfo.value.line}:")


@pytest.mark.parametrize(
    "text,line,fragment",
    [
        (BASE + "[train.sgd]\n", 19, "unknown section"),
        (BASE + "[data]\n", 19, "duplicate section"),
        (BASE + "lr = 3\n", 19, "unknown key"),
        (BASE + "T = 11\n", 19, "duplicate key"),
        (BASE + "just words\n", 19, "expected 'key = value'"),
        ("d = 4\n" + BASE, 1, "outside of any section"),
        ("[model]\nbeta = 0.1\n", 1, "missing required section [data]"),
        (BASE.split("[train.cutout]")[0], 1, "[train.<method>]"),
    ],
)
def test_syntax_errors_carry_line_numbers(text, line, fragment):
    with pytest.raises(ConfigParseError) as excinfo:
        parse_config(text)
    assert excinfo.value.line == line
    assert fragment in excinfo.value.message


def test_comments_and_blank_lines_are_ignored():
    text = "# experiment\n; another comment\n\n" + BASE.replace("n = 12", "n = 12  ")
    assert parse_config(text) == parse_config(BASE)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigParseError, match="cannot read config"):
        load_config(tmp_path / "nope.cfg")
