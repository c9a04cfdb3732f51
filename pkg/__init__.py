from .handler import handler  # noqa
