// quick collision finder via the dlab lib
fn main() {
    use dlab::data::*;
    use std::collections::HashMap;
    let mut seen: HashMap<Vec<u64>, ShapeFactors> = HashMap::new();
    for shape in Shape::ALL {
        for pos_x in 0..GRID {
            for pos_y in 0..GRID {
                for scale in Scale::ALL {
                    for intensity_idx in 0..3 {
                        let f = ShapeFactors { shape, pos_x, pos_y, scale, intensity_idx };
                        let img = render(&f);
                        let bits: Vec<u64> = img.data().iter().map(|v| v.to_bits()).collect();
                        if let Some(prev) = seen.get(&bits) {
                            println!("COLLISION: {:?}  ==  {:?}", prev, f);
                        } else {
                            seen.insert(bits, f);
                        }
                    }
                }
            }
        }
    }
    println!("unique: {}", seen.len());
}
