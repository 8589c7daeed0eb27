//! Stochastic and mode-dependent layers built on the tape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Whether a forward pass is part of training or pure inference.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

/// Inverted dropout: in training mode each entry survives with probability
/// `1 − p` and survivors are scaled by `1/(1 − p)`; in eval mode, identity.
pub fn dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, p: f64, mode: Mode, rng: &mut R) -> Result<Var> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::config(format!("dropout probability {p} outside [0, 1)")));
    }
    if !mode.is_train() || p == 0.0 {
        return Ok(x);
    }
    let keep = 1.0 / (1.0 - p);
    let shape = tape.value(x).shape().to_vec();
    let len = tape.value(x).len();
    let mask = (0..len)
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    tape.mul_const(x, Tensor::new(shape, mask)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_rate_and_eval_mode_are_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![1.0, -2.0, 3.0]));
        let y = dropout(&mut tape, x, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
        let z = dropout(&mut tape, x, 0.7, Mode::Eval, &mut rng).unwrap();
        assert_eq!(tape.value(z), tape.value(x));
    }

    #[test]
    fn rejects_rate_of_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row_vector(vec![1.0]));
        assert!(matches!(
            dropout(&mut tape, x, 1.0, Mode::Train, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn expectation_is_preserved() {
        // Monte Carlo: the mean of 1e5 dropped copies of 1.0 stays within 2%.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::filled(&[1, 100_000], 1.0));
        let y = dropout(&mut tape, x, 0.5, Mode::Train, &mut rng).unwrap();
        let mean = tape.value(y).sum() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }
}
