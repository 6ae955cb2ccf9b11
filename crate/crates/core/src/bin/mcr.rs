fn main() -> anyhow::Result<()> {
    mcr::cli::main()
}
