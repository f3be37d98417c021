mod common;

#[test]
fn autoencoder_loss_closed_forms() {
    println!("{}", common::loss_closed_forms().unwrap());
}
