import pytest

from madformer.application import AblationGrid, ConfigError, RunConfig
from madformer.backbone import TowerMode
from madformer.infrastructure.config_loader import FileConfigLoader, read_mapping


@pytest.fixture
def loader() -> FileConfigLoader:
    return FileConfigLoader()


def test_dotted_keys_fill_their_sections(tmp_path, loader):
    path = tmp_path / "run.toml"
    path.write_text(
        "# overrides on top of the defaults\n"
        "train.steps = 3\n"
        "sampler.steps = 5\n"
        "loss.lambda_image = 2.5\n"
        'model.towers = "shared"\n'
    )

    config = loader.load_config(path)

    assert config.train.steps == 3
    assert config.sampler.num_inference_steps == 5
    assert config.loss.lambda_image == 2.5
    assert config.model.towers == TowerMode.SHARED
    assert config.schedule == RunConfig().schedule


def test_yaml_files_hold_nested_sections(tmp_path, loader):
    path = tmp_path / "run.yaml"
    path.write_text("train:\n  steps: 9\nsampler:\n  num_inference_steps: 4\n")

    config = loader.load_config(path)

    assert config.train.steps == 9
    assert config.sampler.num_inference_steps == 4


def test_no_path_gives_the_defaults(loader):
    assert loader.load_config(None) == RunConfig()


def test_empty_file_gives_the_defaults(tmp_path, loader):
    path = tmp_path / "empty.yaml"
    path.write_text("")

    assert loader.load_config(path) == RunConfig()


def test_unknown_key_is_named_in_the_error(tmp_path, loader):
    path = tmp_path / "run.toml"
    path.write_text("train.stepz = 3\n")

    with pytest.raises(ConfigError, match="train.stepz"):
        loader.load_config(path)


def test_sections_must_agree(tmp_path, loader):
    path = tmp_path / "run.toml"
    path.write_text("data.channels = 3\n")

    with pytest.raises(ConfigError, match="latent_channels"):
        loader.load_config(path)


def test_text_only_data_needs_the_image_term_off(tmp_path, loader):
    path = tmp_path / "run.toml"
    path.write_text("data.text_only = true\ndata.text_len = 1\n")

    with pytest.raises(ConfigError, match="lambda_image"):
        loader.load_config(path)

    path.write_text("data.text_only = true\ndata.text_len = 1\nloss.lambda_image = 0.0\n")
    assert loader.load_config(path).data.text_only


def test_out_of_range_value_is_rejected(tmp_path, loader):
    path = tmp_path / "run.toml"
    path.write_text("model.diffusion_depth = 99\n")

    with pytest.raises(ConfigError):
        loader.load_config(path)


def test_missing_file_is_a_config_error(tmp_path, loader):
    with pytest.raises(ConfigError, match="cannot read"):
        loader.load_config(tmp_path / "nope.toml")


def test_malformed_toml_is_a_config_error(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text("train.steps = = 3\n")

    with pytest.raises(ConfigError, match="cannot parse"):
        read_mapping(path)


def test_top_level_must_be_a_mapping(tmp_path):
    path = tmp_path / "run.yml"
    path.write_text("- 1\n- 2\n")

    with pytest.raises(ConfigError, match="mapping"):
        read_mapping(path)


def test_grid_file_is_loaded(tmp_path, loader):
    path = tmp_path / "grid.toml"
    path.write_text("diffusion_depth = [1, 2]\nnfe_budgets = [10.0]\ncartesian = true\n")

    grid = loader.load_grid(path, n_layers=8)

    assert grid.diffusion_depth == [1, 2]
    assert grid.nfe_budgets == [10.0]
    assert grid.cartesian


def test_default_grid_is_the_published_axes(loader):
    assert loader.load_grid(None, n_layers=8) == AblationGrid.published_axes(8)
