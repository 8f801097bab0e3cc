"""
durable_lab: a desk-scale lab for quantization-recovery attacks on unlearning.

A small fact-memorizing model is pretrained, unlearned with one of several
methods (gradient ascent, GradDiff, NPO, SCRUB, SalUn, task arithmetic and
the quantization-aware SAF objective), then evaluated at full precision and
under simulated INT8/INT4 weight quantization.

Modules:
--------
- autodiff: Reverse-mode differentiation over float64 NumPy arrays.
- quantsim: Symmetric round-to-nearest quantization and the STE hook.
- factmodel: The fact model, adapters, parameter sets and checkpoints.
- optim: AdamW with a cosine schedule and gradient clipping.
- datagen: Synthetic entity-attribute-value facts and their splits.
- unlearn: Pretraining and every unlearning method.
- evalsuite: Metrics, sharpness diagnostics, certificates and aggregation.
- attacks: Quantization, fine-tuning and adapter-vs-merged attacks.
- experiment: Experiment JSON files and run enumeration.
- harness: Orchestration and report files.
- reports / publisher: Atomic local output and S3 publishing.
- container / runner: Dependency wiring and the command line.

Lazy CLI Import:
----------------
``cli`` is resolved through ``__getattr__`` so importing the package for
library use does not pull in the runner and its collaborators.

Example:
--------
$ python -m durable_lab attack --config configs/table1-demo.json
"""

__all__ = [
    "autodiff",
    "quantsim",
    "factmodel",
    "optim",
    "datagen",
    "unlearn",
    "evalsuite",
    "attacks",
    "experiment",
    "harness",
    "container",
    "runner",
]


def __getattr__(name):
    """Lazily imports `cli` when accessed as `durable_lab.cli`."""
    if name == "cli":
        from .runner import cli

        return cli
    raise AttributeError(name)
