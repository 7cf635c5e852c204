fn main() {
    println!("holomon");
}
