"""Link-level simulation lab for ISI channels.

Message-passing neural detection (GNN/FGNN) on Forney- and
Ungerboeck-style factor graphs, joint detection-and-decoding on combined
detector/Tanner graphs, exact and classical baselines (BCJR, damped SPA,
block LMMSE, LDPC belief propagation) and the measurement tooling around
them: BER/BLER harness, information estimation, EXIT charts, achievable
rates and a latency cycle model.
"""

__version__ = "0.1.0"
