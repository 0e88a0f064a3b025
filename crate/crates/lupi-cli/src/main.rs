fn main() {
    println!("lupi");
}
