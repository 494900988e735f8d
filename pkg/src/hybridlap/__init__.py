"""Closed-loop lap simulation and hierarchical online control of a hybrid race power unit.

The package is organised along the controller hierarchy:

- ``plant``: spatial-domain power-unit and vehicle model (per-meter dynamics)
- ``track``: synthetic loop circuits and maximum-velocity envelopes
- ``adiff`` / ``qp`` / ``nlp``: forward-mode duals, an active-set QP and an SQP
  solver on a direct multiple-shooting transcription
- ``offline``: lap-time optimal control for nominal references and non-causal
  benchmark solutions
- ``driver`` / ``estimator`` / ``eltms`` / ``fcc`` / ``nmpc``: the online stack
- ``harness``: closed-loop runner, disturbance scenarios, telemetry and reports
"""

__version__ = "0.1.0"
