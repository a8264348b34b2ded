import pytest

from deskgan.config import ConfigError, RunConfig


def test_parse_and_broadcast():
    cfg = RunConfig.parse("""
        phantom_count = 10   # synthetic
        channels = 16, 8
        images_stable = 100
        batch_sizes = 4,2
        n_critic = 1, 3
        mbstd = false
    """)
    sched = cfg.schedule()
    assert [s.images_stable for s in sched.stages] == [100, 100]
    assert [s.batch_size for s in sched.stages] == [4, 2]
    assert sched.n_critic(1) == 3 and cfg.mbstd is False
    assert cfg.plan().resolution(1) == (16, 16)


def test_phantom_seed_follows_run_seed():
    cfg = RunConfig.parse("phantom_count = 3\nseed = 9\n")
    assert cfg.phantom().seed == 9
    assert RunConfig.parse("phantom_count = 3\nseed = 9\nphantom_seed = 2\n").phantom().seed == 2


@pytest.mark.parametrize("text", [
    "channels = 8\n",
    "phantom_count = 3\ndata_dir = x\n",
    "phantom_count = 3\nbogus = 1\n",
    "phantom_count = 3\nn_critic = 9\n",
    "phantom_count = 3\nchannels = 8, 16\n",
    "phantom_count = 3\nbatch_sizes = 1, 2, 3\n",
    "phantom_count = 3\nmbstd = maybe\n",
    "phantom_count = abc\n",
    "no equals sign\n",
])
def test_invalid(text):
    with pytest.raises(ConfigError):
        RunConfig.parse(text)


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        RunConfig.from_file(tmp_path / "none.cfg")
