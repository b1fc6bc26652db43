"""
Wait Helper utility for polling conditions and bounded blocking receives.

Used by the in-process message layer so that a stalled rank turns into a
timeout error instead of a hang.
"""

import queue
import time
from typing import Callable

from fmm.constants import Timeouts
from utils.logger import get_logger


class WaitHelper:
    """
    Utility class for waits with timeouts (all durations in seconds).
    """

    def __init__(self, default_timeout=Timeouts.RECEIVE, poll_interval=Timeouts.POLL_INTERVAL):
        """
        Initialize WaitHelper.

        Args:
            default_timeout: Default timeout in seconds
            poll_interval: Interval between condition checks in seconds
        """
        self.default_timeout = default_timeout
        self.poll_interval = poll_interval
        self.logger = get_logger().child("wait")

    def custom_wait(self, condition: Callable[[], bool], timeout=None, poll_interval=None):
        """
        Wait for a custom condition to be met.

        Args:
            condition: Callable that returns True when condition is met
            timeout: Timeout in seconds
            poll_interval: Interval between checks in seconds

        Returns:
            bool: True if condition met, False if timeout
        """
        timeout = self.default_timeout if timeout is None else timeout
        poll_interval = poll_interval or self.poll_interval
        deadline = time.monotonic() + timeout

        while True:
            if condition():
                return True
            if time.monotonic() >= deadline:
                break
            time.sleep(poll_interval)

        self.logger.debug(f"Condition not met within {timeout}s")
        return False

    def wait_for_item(self, mailbox: queue.Queue, timeout=None, abort: Callable[[], bool] = None):
        """
        Take the next item from a mailbox, giving up after ``timeout``.

        Args:
            mailbox: queue to read
            timeout: Timeout in seconds
            abort: optional callable; when it returns True the wait stops early

        Returns:
            tuple: (True, item) on success, (False, None) on timeout or abort
        """
        timeout = self.default_timeout if timeout is None else timeout
        deadline = time.monotonic() + timeout

        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                return False, None
            try:
                return True, mailbox.get(timeout=min(self.poll_interval, remaining))
            except queue.Empty:
                if abort is not None and abort():
                    return False, None

