import time
import logging
from django.conf import settings

logger = logging.getLogger(__name__)


class StageMonitor:
    """
    Context manager that times a pipeline stage and logs its outcome
    """

    def __init__(self, name: str, slow_threshold: float = None):
        self.name = name
        self.slow_threshold = (
            slow_threshold if slow_threshold is not None
            else getattr(settings, 'UNCERTFLOW_SLOW_STAGE_SECONDS', 30.0)
        )
        self.start_time = None
        self.duration = None

    def __enter__(self):
        """Start timing the stage"""
        self.start_time = time.time()
        return self

    def __exit__(self, exc_type, exc, tb):
        """Log stage details and timing"""
        self.duration = time.time() - self.start_time

        if exc is not None:
            logger.error(
                f"Exception in stage {self.name}: {exc} - "
                f"Duration: {self.duration:.3f}s"
            )
            return False

        logger.info(f"Stage: {self.name} - Duration: {self.duration:.3f}s")

        # Track slow stages
        if self.duration > self.slow_threshold:
            logger.warning(
                f"Slow stage detected: {self.name} - "
                f"Duration: {self.duration:.3f}s"
            )
        return False
