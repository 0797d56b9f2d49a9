"""Experiment harness: toy data, file formats, configuration, runner and metrics.

Import the submodules directly; this package keeps no re-exports so the lower layers can
use ``harness.formats`` without pulling in the runner.
"""
