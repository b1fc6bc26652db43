"""
Output Helper utility for naming run outputs and dumping inputs of failed tests.
"""

import os
from datetime import datetime
from pathlib import Path


class OutputHelper:
    """
    Utility class for run output files.

    Every file name carries the config hash, so outputs of different
    configurations never mix in one directory.
    """

    def __init__(self, output_dir="results", config_hash=None):
        """
        Initialize OutputHelper.

        Args:
            output_dir: Directory to write outputs into
            config_hash: Hash stamped into every file name (optional)
        """
        self.output_dir = output_dir
        self.config_hash = config_hash

        # Create output directory if it doesn't exist
        Path(output_dir).mkdir(parents=True, exist_ok=True)

    def path_for(self, kind, extension, step=None, tag=""):
        """
        Build an output path.

        Args:
            kind: Output kind (snapshot, spectrum, report, ...)
            extension: File extension without the dot
            step: Optional step number
            tag: Optional extra label

        Returns:
            str: Path inside the output directory
        """
        parts = [kind]
        if tag:
            parts.append(tag)
        if self.config_hash:
            parts.append(self.config_hash)
        if step is not None:
            parts.append(f"step{step:05d}")
        filename = self._sanitize_filename("_".join(parts) + f".{extension}")
        return os.path.join(self.output_dir, filename)

    def capture_on_failure(self, test_name, error_message="", particles=None):
        """
        Dump a failing test's particle inputs and error text.

        Args:
            test_name: Name of the test
            error_message: Error message for context
            particles: Optional ParticleSet written as a snapshot

        Returns:
            str: Path to the error file
        """
        timestamp = datetime.now().strftime("%Y%m%d_%H%M%S_%f")[:-3]
        base = os.path.join(self.output_dir, self._sanitize_filename(f"{test_name}_FAILURE_{timestamp}"))

        try:
            if particles is not None:
                from flow.fields import write_snapshot

                write_snapshot(base + ".vpm", particles, 0.0)
            with open(base + "_error.txt", "w") as f:
                f.write(f"Test: {test_name}\n")
                f.write(f"Timestamp: {timestamp}\n")
                f.write(f"Error: {error_message}\n")
                if particles is not None:
                    f.write(f"Particles: {len(particles)}\n")
            return base + "_error.txt"
        except Exception as e:
            print(f"Failed to write failure dump: {str(e)}")
            return None

    def _sanitize_filename(self, filename):
        """
        Sanitize filename by removing invalid characters.

        Args:
            filename: Original filename

        Returns:
            str: Sanitized filename
        """
        invalid_chars = '<>:"/\\|?* '
        for char in invalid_chars:
            filename = filename.replace(char, '_')

        while '__' in filename:
            filename = filename.replace('__', '_')

        return filename
