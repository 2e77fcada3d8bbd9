from pathlib import Path

from correspondence.datagen import generate_dataset, load_base_images
from correspondence.management.base import CorrespondenceCommand


class Command(CorrespondenceCommand):
    help = 'Generate a synthetic dataset of image pairs with ground-truth flow and masks'

    def add_command_arguments(self, parser):
        parser.add_argument('--output', required=True, help='dataset directory to create')
        parser.add_argument('--count', type=int, help='number of samples (num_samples)')
        parser.add_argument('--base-images', dest='base_images',
                            help='directory of PPM/PNG base images (base_image_dir)')

    def config_overrides(self, options):
        return {'num_samples': options.get('count'), 'base_image_dir': options.get('base_images')}

    def run(self, config, **options):
        base_images = None
        if config.base_image_dir:
            base_images = load_base_images(config.base_image_dir, config.base_size)
        output = Path(options['output'])
        manifest = generate_dataset(config, output, threads=config.threads or None,
                                    base_images=base_images)
        return f"Generated {manifest['count']} samples in {output}"
