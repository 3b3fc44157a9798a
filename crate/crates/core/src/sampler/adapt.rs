/// Random-walk step size with Robbins-Monro adaptation over fixed windows.
#[derive(Debug, Clone)]
pub(crate) struct Adaptive {
    pub log_scale: f64,
    window_accepted: u32,
    window_proposed: u32,
    windows: u32,
    accepted: u64,
    proposed: u64,
}

impl Adaptive {
    pub fn new(scale: f64) -> Self {
        Self {
            log_scale: scale.ln(),
            window_accepted: 0,
            window_proposed: 0,
            windows: 0,
            accepted: 0,
            proposed: 0,
        }
    }

    #[inline]
    pub fn scale(&self) -> f64 {
        self.log_scale.exp()
    }

    #[inline]
    pub fn record(&mut self, accepted: bool) {
        self.window_proposed += 1;
        self.proposed += 1;
        if accepted {
            self.window_accepted += 1;
            self.accepted += 1;
        }
    }

    /// Closes an adaptation window: `log s += (rate − target)·2/√w`.
    pub fn adapt(&mut self, target: f64) {
        if self.window_proposed > 0 {
            self.windows += 1;
            let rate = self.window_accepted as f64 / self.window_proposed as f64;
            self.log_scale += (rate - target) * 2.0 / (self.windows as f64).sqrt();
            self.log_scale = self.log_scale.clamp(-30.0, 10.0);
        }
        self.window_accepted = 0;
        self.window_proposed = 0;
    }

    /// Clears the running totals, used when burn-in ends.
    pub fn reset_totals(&mut self) {
        self.accepted = 0;
        self.proposed = 0;
        self.window_accepted = 0;
        self.window_proposed = 0;
    }

    pub fn totals(&self) -> (u64, u64) {
        (self.accepted, self.proposed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adaptation_moves_scale_toward_target() {
        let mut a = Adaptive::new(1.0);
        for _ in 0..10 {
            a.record(true);
        }
        a.adapt(0.44);
        assert!(a.scale() > 1.0);
        let s = a.scale();
        for _ in 0..10 {
            a.record(false);
        }
        a.adapt(0.44);
        assert!(a.scale() < s);
        assert_eq!(a.totals(), (10, 20));
        a.reset_totals();
        assert_eq!(a.totals(), (0, 0));
    }
}
