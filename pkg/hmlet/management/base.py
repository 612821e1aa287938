import json
import logging
from pathlib import Path

from django.core.exceptions import ImproperlyConfigured
from django.core.management.base import BaseCommand, CommandError

from hmlet.checkpoint import load_checkpoint
from hmlet.exceptions import HmletError
from hmlet.graph import STATS_FILENAME, read_prepared
from hmlet.utils import dump_json

USAGE_ERROR = 2
RUNTIME_ERROR = 1
CONFIG_FILENAME = 'config.json'

VERBOSITY_LEVELS = {0: logging.ERROR, 1: logging.INFO, 2: logging.DEBUG, 3: logging.DEBUG}


class UsageError(ImproperlyConfigured):
    """A required argument is missing or points nowhere."""
    pass


class HmletCommand(BaseCommand):
    """
    Common plumbing of the hmlet commands: configuration and usage problems end with exit status 2
    and the usage line, failures at runtime with exit status 1.
    """
    requires_system_checks = []

    def create_parser(self, prog_name, subcommand, **kwargs):
        parser = super().create_parser(prog_name, subcommand, **kwargs)
        self.usage = parser.format_usage().strip()
        return parser

    def execute(self, *args, **options):
        logging.getLogger('hmlet').setLevel(VERBOSITY_LEVELS.get(options.get('verbosity', 1), logging.INFO))
        try:
            return super().execute(*args, **options)
        except ImproperlyConfigured as exc:
            usage = getattr(self, 'usage', '')
            raise CommandError(f"{usage}\n{exc}" if usage else str(exc), returncode=USAGE_ERROR) from exc
        except (HmletError, OSError) as exc:
            raise CommandError(str(exc), returncode=RUNTIME_ERROR) from exc

    def require_path(self, options, name, directory=False):
        value = options.get(name)
        if not value:
            raise UsageError(f"the argument --{name.replace('_', '-')} is required")
        path = Path(value)
        if not path.exists() or (directory and not path.is_dir()):
            raise UsageError(f"--{name.replace('_', '-')}: '{value}' does not exist")
        return path

    def worker_count(self, options):
        threads = options.get('threads', 1)
        if threads < 1:
            raise UsageError(f"--threads must be at least 1, got {threads}")
        return threads

    def read_graph(self, options):
        directory = self.require_path(options, 'data', directory=True)
        if not (directory / STATS_FILENAME).exists():
            raise UsageError(f"--data: '{directory}' holds no prepared dataset, run prepare first")
        return read_prepared(directory)

    def read_model(self, options, graph):
        path = self.require_path(options, 'checkpoint')
        params, checkpoint_id = load_checkpoint(path, graph)
        return path, params, checkpoint_id

    def run_config(self, checkpoint_path):
        """The validated training configuration stored next to a checkpoint, if there is one."""
        config_path = Path(checkpoint_path).parent / CONFIG_FILENAME
        if not config_path.exists():
            return {}
        try:
            return json.loads(config_path.read_text(encoding='utf-8'))
        except ValueError as exc:
            raise HmletError(f"Cannot parse '{config_path}': {exc}") from exc

    def emit(self, payload, out=None):
        text = dump_json(payload, indent=2) + '\n'
        if out:
            Path(out).write_text(text, encoding='utf-8')
            self.stdout.write(self.style.SUCCESS(f"Report written to {out}"))
        else:
            self.stdout.write(text, ending='')
