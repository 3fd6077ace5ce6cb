"""Optional file-access audit trail.

When the ENGAGE_MIL_AUDIT environment variable names a file, every dataset,
feature, frame or annotation file opened for reading is appended to it as an
absolute path, one per line.  Tests use the trail to prove that training
never touches held-out inputs.
"""

import os
from pathlib import Path

ENV_VAR = "ENGAGE_MIL_AUDIT"


def note_read(path) -> None:
    target = os.environ.get(ENV_VAR)
    if not target:
        return
    with open(target, "a") as fh:
        fh.write(str(Path(path).resolve()) + "\n")
