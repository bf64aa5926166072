import pytest

from metadapt.pipeline import RunConfig

TINY = dict(
    dataset={"num_classes": 25, "samples_per_class": 16, "channels": 3, "height": 16, "width": 16,
             "noise_level": 1.0, "transform_jitter": 2.5, "blobs": 4},
    stem_channels=[4, 4],
    nodes=3,
    q_query=2,
    pretrain_epochs=1,
    search_epochs=2,
    episodes_per_epoch=8,
    controller_episodes=8,
    val_episodes=4,
    gap_episodes=4,
    eval_episodes=6,
    finetune_iters=2,
)


@pytest.fixture
def tiny_cfg(tmp_path):
    def make(**overrides):
        kw = dict(TINY, output_dir=str(tmp_path / "run"))
        kw.update(overrides)
        return RunConfig(**kw)

    return make
