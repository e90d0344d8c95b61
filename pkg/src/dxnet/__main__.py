from dxnet.cli import main

main()
