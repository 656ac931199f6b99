use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Role, SiteData};
use crate::simulate::{
    gen_covariates, gen_outcomes_and_treatment, Coefficients, Setting, SiteModel,
};

/// One simulated site with `p` covariates at location 0.125; `source` picks
/// the source-site propensity and a skewness of `nu`.
pub fn sim_site(
    n: usize,
    p: usize,
    setting: Setting,
    source: Option<usize>,
    nu: f64,
    seed: u64,
) -> SiteData<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kappa = vec![0.125; p];
    let coef = Coefficients::new(p);
    let x = gen_covariates(n, &kappa, nu, &mut rng);
    let o = gen_outcomes_and_treatment(
        &x,
        &kappa,
        SiteModel::for_site(setting, source),
        &coef,
        &mut rng,
    );
    let role = if source.is_some() {
        Role::Source
    } else {
        Role::Target
    };
    let id = source.map_or("target".to_string(), |j| format!("source{j:02}"));
    SiteData::new(id, o.y, o.treated, x, role).expect("simulated site is valid")
}

pub fn target_psi_bar(p: usize) -> Vec<f64> {
    let mut v = vec![1.0];
    v.extend(std::iter::repeat_n(0.125, p));
    v
}
