fn main() { println!("{}", gatt_core::probe()); }
