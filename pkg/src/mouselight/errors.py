"""Exception hierarchy shared by every layer.

``exit_code`` is what the CLI returns when the error escapes a command.
"""


class MouselightError(Exception):
    exit_code = 1

    @property
    def kind(self) -> str:
        return type(self).__name__


class UsageError(MouselightError):
    exit_code = 2


class DeviceError(MouselightError):
    exit_code = 3
