import os
import sys

from hypothesis import HealthCheck, settings

# Keep property runs deterministic and bounded; individual tests can widen
# max_examples where cheap.
settings.register_profile(
    "ci",
    max_examples=25,
    deadline=None,
    derandomize=True,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("DUMPWATCH_HYPOTHESIS_PROFILE", "ci"))

sys.path.insert(0, os.path.dirname(__file__))
