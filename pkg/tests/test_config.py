import pytest

from ddmm.config import RunConfig, load, loads
from ddmm.errors import ConfigError


def test_empty_file_gives_defaults():
    assert loads("") == RunConfig()
    assert loads("[train]\n") == RunConfig()


def test_overrides_route_to_their_dataclass():
    cfg = loads(
        "[phantom]\n"
        "size = 64\n"
        "rib_count = 2, 4\n"
        "n_labeled = 50\n"
        "[model]\n"
        "kind = linear\n"
        "t_max = 20\n"
        "init_seed = 9\n"
        "[train]\n"
        "epochs = 5  # five\n"
        "learning_rate = 2e-4\n"
        "[sampler]\n"
        "kind = ddim\n"
        "shared_step_noise = no\n"
        "n = 12\n"
    )
    assert cfg.phantom.size == 64 and cfg.phantom.rib_count == (2, 4)
    assert cfg.data.n_labeled == 50 and cfg.data.n_unlabeled == 2000
    assert cfg.schedule.kind == "linear" and cfg.schedule.t_max == 20
    assert cfg.init.init_seed == 9
    assert cfg.train.epochs == 5 and cfg.train.learning_rate == 2e-4
    assert cfg.sampler.kind == "ddim" and cfg.sampler.shared_step_noise is False
    assert cfg.sample_count.n == 12
    assert cfg.schedule.build().t_max == 20


def test_unknown_key_names_its_line():
    with pytest.raises(ConfigError, match="line 3: unknown key 'bogus'") as info:
        loads("[train]\nepochs = 3\nbogus = 1\n")
    assert info.value.lineno == 3


def test_unknown_section_names_its_line():
    with pytest.raises(ConfigError, match=r"line 4: unknown section \[optimizer\]"):
        loads("[train]\nepochs = 3\n\n[optimizer]\nlr = 1\n")


def test_bad_value_names_its_line():
    with pytest.raises(ConfigError, match="line 3: bad value for 'epochs'"):
        loads("[train]\n\nepochs = many\n")
    with pytest.raises(ConfigError, match="line 2"):
        loads("[phantom]\nrib_count = 3\n")
    with pytest.raises(ConfigError, match="line 2"):
        loads("[sampler]\nclamp = maybe\n")


def test_hidden_fields_are_not_keys():
    with pytest.raises(ConfigError, match="in_channels"):
        loads("[model]\nin_channels = 3\n")


def test_invalid_combinations_are_config_errors():
    with pytest.raises(ConfigError, match=r"line 1: \[train\]"):
        loads("[train]\nseed_supervised = 2\n")
    with pytest.raises(ConfigError, match="divisible"):
        loads("[phantom]\nsize = 30\n")


def test_malformed_files():
    with pytest.raises(ConfigError, match="line 1"):
        loads("epochs = 3\n")
    with pytest.raises(ConfigError):
        loads("[train]\nepochs = 3\nepochs = 4\n")


def test_dumps_round_trips():
    cfg = loads("[phantom]\nsize = 16\nnoise_sigma = 0.05\n[model]\ndepth = 1\n[segmenter]\ndepth = 1\n[metrics]\nadjusted_rand = true\n")
    text = cfg.dumps()
    assert loads(text) == cfg
    assert "[metrics]\n" in text and "adjusted_rand = true" in text
    assert "in_channels" not in text


def test_with_seed_sets_every_seed():
    cfg = RunConfig().with_seed(42)
    assert cfg.phantom.seed == 42 and cfg.init.init_seed == 42 and cfg.sampler.base_seed == 42
    assert cfg.train == RunConfig().train


def test_as_dict_is_json_friendly():
    d = RunConfig().as_dict()
    assert d["phantom"]["rib_count"] == [3, 6]
    assert d["model"]["kind"] == "cosine"
    assert set(d) == {"phantom", "model", "train", "sampler", "metrics", "segmenter"}


def test_load_reads_files(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text("[train]\nepochs = 7\n")
    assert load(path).train.epochs == 7
    with pytest.raises(ConfigError, match="cannot read"):
        load(tmp_path / "missing.ini")
