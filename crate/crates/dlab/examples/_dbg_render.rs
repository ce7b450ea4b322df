fn main() {
    use dlab::data::*;
    for shape in [Shape::Square, Shape::Ellipse, Shape::Triangle] {
        let f = ShapeFactors { shape, pos_x: 0, pos_y: 0, scale: Scale::Small, intensity_idx: 2 };
        let img = render(&f);
        println!("--- {:?} small at (0,0), nonzero pixels:", shape);
        for iy in 0..6 {
            for ix in 0..6 {
                let v = img.data()[iy * 32 + ix];
                if v > 0.0 { print!("({ix},{iy})={v:.4} "); }
            }
        }
        println!();
    }
}
