from pathlib import Path

from django.core.exceptions import ImproperlyConfigured

from hmlet.checkpoint import save_checkpoint
from hmlet.forms import load_run_config
from hmlet.management.base import CONFIG_FILENAME, HmletCommand
from hmlet.model import VARIANT_NAMES
from hmlet.numerics import ACTIVATIONS
from hmlet.trainer import TEMPERATURE_SCHEDULES, train
from hmlet.utils import dump_json

LOG_FILENAME = 'train.jsonl'
CHECKPOINT_FILENAME = 'best.hmlt'

# flag, destination, type
TRAIN_OPTIONS = [
    ('--learning-rate', 'learning_rate', float),
    ('--lambda-l2', 'lambda_l2', float),
    ('--batch-size', 'batch_size', int),
    ('--dropout-rate', 'dropout_rate', float),
    ('--tau0', 'tau0', float),
    ('--tau-min', 'tau_min', float),
    ('--tau-decay', 'tau_decay', float),
    ('--epochs', 'max_epochs', int),
    ('--patience', 'patience', int),
    ('--dim', 'dim', int),
    ('--seed', 'seed', int),
    ('--eval-k', 'eval_k', int),
    ('--threads', 'threads', int),
]


class Command(HmletCommand):
    help = "Train a model on a prepared dataset, writing the run config, the epoch log and the best checkpoint."

    def add_arguments(self, parser):
        parser.add_argument('--data', help="Directory of a prepared dataset.")
        parser.add_argument('--out', help="Directory receiving config, log and checkpoint.")
        parser.add_argument('--config', help="File with 'key = value' lines overriding the defaults.")
        parser.add_argument('--variant', choices=VARIANT_NAMES, default=None)
        parser.add_argument('--activation', choices=ACTIVATIONS, default=None)
        parser.add_argument('--temperature-schedule', dest='temperature_schedule', choices=TEMPERATURE_SCHEDULES, default=None)
        parser.add_argument('--hidden-gate', dest='hidden_gate', action='store_true', default=None,
                            help="Give every gating MLP a hidden layer of width D.")
        for flag, dest, kind in TRAIN_OPTIONS:
            parser.add_argument(flag, dest=dest, type=kind, default=None)

    def handle(self, *args, **options):
        graph = self.read_graph(options)
        if not options.get('out'):
            raise ImproperlyConfigured("the argument --out is required")
        config_file = self.require_path(options, 'config') if options.get('config') else None
        cfg = load_run_config(options, config_file)

        out = Path(options['out'])
        out.mkdir(parents=True, exist_ok=True)
        (out / CONFIG_FILENAME).write_text(dump_json(cfg.as_dict(), indent=2) + '\n', encoding='utf-8')
        checkpoint_path = out / CHECKPOINT_FILENAME
        best = {}

        with (out / LOG_FILENAME).open('w', encoding='utf-8') as log_file:
            def on_epoch(record):
                log_file.write(dump_json(record) + '\n')
                log_file.flush()

            def on_improvement(params, record):
                best['id'] = save_checkpoint(checkpoint_path, params, graph.num_users, graph.num_items)
                best['record'] = record

            _, history = train(graph, cfg, on_epoch=on_epoch, on_improvement=on_improvement)

        record = best['record']
        self.stdout.write(
            f"{len(history)} epochs, best validation NDCG@{cfg.eval_k} {record['val']['ndcg']:.5f} in epoch {record['epoch']}"
        )
        self.stdout.write(self.style.SUCCESS(f"Checkpoint {best['id']} written to {checkpoint_path}"))
