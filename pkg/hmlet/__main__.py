"""
Console entry point: ``hmlet prepare|train|evaluate|analyze [options]``.

Outside of a Django project a minimal settings object is configured, which installs the hmlet app
and sends its log records to stderr so that reports on stdout stay parseable.
"""
import os
import sys

SUBCOMMANDS = ('prepare', 'train', 'evaluate', 'analyze')

CONSOLE_SETTINGS = {
    'INSTALLED_APPS': ['hmlet'],
    'LOGGING': {
        'version': 1,
        'disable_existing_loggers': False,
        'formatters': {
            'plain': {'format': '%(asctime)s %(levelname)s %(name)s: %(message)s'},
        },
        'handlers': {
            'stderr': {
                'class': 'logging.StreamHandler',
                'stream': 'ext://sys.stderr',
                'formatter': 'plain',
            },
        },
        'loggers': {
            'hmlet': {'handlers': ['stderr'], 'level': 'INFO', 'propagate': False},
        },
    },
}


def usage():
    return f"usage: hmlet {{{','.join(SUBCOMMANDS)}}} [options]\n"


def main(argv=None):
    import django
    from django.conf import settings
    from django.core.management import execute_from_command_line

    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv or argv[0] in ('-h', '--help'):
        sys.stdout.write(usage())
        return 0
    subcommand = argv[0]
    if subcommand not in SUBCOMMANDS:
        sys.stderr.write(usage())
        sys.stderr.write(f"hmlet: error: unknown command '{subcommand}'\n")
        return 2
    if not os.environ.get('DJANGO_SETTINGS_MODULE') and not settings.configured:
        settings.configure(**CONSOLE_SETTINGS)
    django.setup()
    execute_from_command_line(['hmlet', f'hmlet_{subcommand}', *argv[1:]])
    return 0


if __name__ == '__main__':
    sys.exit(main())
