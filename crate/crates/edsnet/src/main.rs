use edsnet::bench::CountingAlloc;

/// Counting allocator so bench rows report real peak usage.
#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn main() {
    if let Err(e) = edsnet::cli::run() {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
