"""Run the compensation module on one link and show its step counts and blend confidence.

    python demos/compensation_trace.py
"""
import numpy as np

from latsync.perception import CollabModel, ModelConfig
from latsync.syncnet import CompensationConfig, SyncNet
from latsync.tensor import Tensor

C = 8


def main():
    model = CollabModel(ModelConfig(feat_channels=C))
    net = SyncNet(CompensationConfig(k=3), C)
    rng = np.random.default_rng(0)
    ego = Tensor(rng.normal(size=(16, 16, C)))
    history = [Tensor(rng.normal(size=(16, 16, C))) for _ in range(3)]
    print("tau  steps(F,W)  decodes(F,W)  mean m_F  |F_out - F_stale|")
    for tau in range(6):
        net.trace.reset()
        f, _ = net.compensate(ego, history, tau, model.attention_net)
        s, d = net.trace.steps, net.trace.decodes
        m = "-" if tau == 0 else f"{net.last_confidence.m_f.data.mean():.3f}"
        gap = np.abs(f.data - history[-1].data).mean()
        print(f"{tau:>3}  {s['F']:>4},{s['W']:<4}   {d['F']:>4},{d['W']:<4}    {m:>8}  {gap:.4f}")


if __name__ == "__main__":
    main()
