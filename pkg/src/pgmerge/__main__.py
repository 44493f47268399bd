from pgmerge.cli import main

main()
