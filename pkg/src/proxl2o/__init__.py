"""proxl2o: learned proximal-gradient optimizers with classic baselines.

Modules:
    densecore  dense kernels, seeded random streams, spectral utilities
    problems   composite optimizees, generators, problem-set files
    prox       diagonal-metric proximal operators
    classic    ISTA / FISTA / variable-metric PGD / subgradient / Adam
    tape       reverse-mode autodiff for the unrolled schemes
    learned    LSTM-parameterized structured update rules and ablations
    training   truncated-BPTT meta-training and checkpoints
    evalbench  gap curves, theory checks, runtime tables
    cli        the `proxl2o` command-line entry point
"""

__version__ = "0.1.0"
