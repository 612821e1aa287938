import os
from pathlib import Path

from django.core.exceptions import ImproperlyConfigured

from hmlet.graph import DEFAULT_RATIOS, FORMAT_AUTO, FORMATS, dataset_statistics, kcore_filter, load_interactions, split, write_prepared
from hmlet.management.base import HmletCommand
from hmlet.utils import SEED_ENVIRON

DEFAULT_KCORE = 10


def parse_ratios(value):
    try:
        return tuple(float(part) for part in value.split(','))
    except ValueError as exc:
        raise ImproperlyConfigured(f"--ratios expects three comma separated numbers, got '{value}'.") from exc


class Command(HmletCommand):
    help = "Filter an interaction edge list to its k-core and split it per user into train, validation and test."

    def add_arguments(self, parser):
        parser.add_argument('--input', help="Raw edge list, one 'user item' or 'user item item ...' per line.")
        parser.add_argument('--out', help="Directory receiving the prepared dataset.")
        parser.add_argument('--format', choices=FORMATS, default=FORMAT_AUTO)
        parser.add_argument('--kcore', type=int, default=DEFAULT_KCORE, help="Minimum degree of users and items.")
        parser.add_argument('--ratios', default=','.join(str(r) for r in DEFAULT_RATIOS),
                            help="Train, validation and test shares of every user's items.")
        parser.add_argument('--seed', type=int, default=None)

    def handle(self, *args, **options):
        source = self.require_path(options, 'input')
        if not options.get('out'):
            raise ImproperlyConfigured("the argument --out is required")
        if options['kcore'] < 1:
            raise ImproperlyConfigured("--kcore must be at least 1")
        seed = options['seed']
        if seed is None:
            try:
                seed = int(os.environ.get(SEED_ENVIRON) or 0)
            except ValueError as exc:
                raise ImproperlyConfigured(f"{SEED_ENVIRON} must be an integer.") from exc

        raw = load_interactions(source, options['format'])
        filtered = kcore_filter(raw, options['kcore'])
        stats = dataset_statistics(filtered)
        graph = split(filtered, parse_ratios(options['ratios']), seed)
        out = Path(options['out'])
        write_prepared(graph, out, dict(stats, kcore=options['kcore'], seed=seed))

        self.stdout.write(
            f"users {stats['users']}, items {stats['items']}, interactions {stats['interactions']}, "
            f"sparsity {stats['sparsity']:.6f}"
        )
        self.stdout.write(self.style.SUCCESS(f"Prepared dataset written to {out}"))
