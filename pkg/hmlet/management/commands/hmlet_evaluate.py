from django.core.exceptions import ImproperlyConfigured

from hmlet.evaluator import DEFAULT_K, EVAL_SPLITS, evaluate
from hmlet.management.base import HmletCommand
from hmlet.numerics import ACTIVATIONS, LEAKY_RELU


class Command(HmletCommand):
    help = "Compute NDCG, recall and precision at k of a checkpoint on the validation or test split."

    def add_arguments(self, parser):
        parser.add_argument('--checkpoint', help="Checkpoint written by the train command.")
        parser.add_argument('--data', help="Directory of the prepared dataset the checkpoint was trained on.")
        parser.add_argument('--split', choices=EVAL_SPLITS, default='test')
        parser.add_argument('--k', type=int, default=None)
        parser.add_argument('--activation', choices=ACTIVATIONS, default=None)
        parser.add_argument('--threads', type=int, default=1)
        parser.add_argument('--out', help="Write the JSON report to this file instead of stdout.")

    def handle(self, *args, **options):
        graph = self.read_graph(options)
        path, params, checkpoint_id = self.read_model(options, graph)
        run_config = self.run_config(path)
        activation = options['activation'] or run_config.get('activation', LEAKY_RELU)
        k = options['k'] if options['k'] is not None else run_config.get('eval_k', DEFAULT_K)
        if k < 1:
            raise ImproperlyConfigured('--k must be at least 1')
        report = evaluate(params, graph, options['split'], k, activation, workers=self.worker_count(options))
        self.emit(report.as_dict(variant=str(params.variant), checkpoint_id=checkpoint_id), options.get('out'))
