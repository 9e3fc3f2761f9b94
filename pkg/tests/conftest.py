import sys
from pathlib import Path

from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")

# a 32x32 world with narrow layers: fast enough for end-to-end tests
SMALL = ["world.grid=32", "world.lo=-16", "world.hi=16", "world.agent_radius=12", "world.agent_range=20",
         "world.n_objects=3", "model.obs_grid=32", "model.world_lo=-16", "model.world_hi=16",
         "model.feat_channels=4", "model.enc_channels=4", "model.dec_channels=4", "model.attn_hidden=4"]


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: trains the benchmark preset (cached after the first run)")


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 12):
        terminalreporter.write_line(mod.VERDICTS.get(n, f"criterion {n:>2}: FAIL  did not reach a verdict"))
