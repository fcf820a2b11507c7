"""python -m quantcli --model MODEL.json --data IMAGES.idx [flags] {transform,calibrate,finetune,compile,eval,run}"""
from jsonargparse import CLI

from quantcli.pipeline import QuantPipeline


def main(args: list[str] = None):
    return CLI(QuantPipeline, as_positional=False, args=args)


if __name__ == "__main__":
    main()
