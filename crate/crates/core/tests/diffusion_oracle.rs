mod common;

#[test]
fn iterated_forward_steps_match_the_marginal() {
    println!("{}", common::diffusion_marginal().unwrap());
}
