mod common;

use common::{fd_check, random_params, random_response, small_task, with_theta, FdCheck};
use pbsd_lab::losses::{kl_matching_loss, pbsd_grad, pbsd_loss, sft_loss, KlDirection, PreferencePair};
use pbsd_lab::policy::{Backend, PolicyParams, PolicyView};
use pbsd_lab::tasks::{TaskInstance, TokenSeq};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const BACKENDS: [Backend; 2] = [Backend::Tabular, Backend::Linear { feature_dim: Some(40) }];

fn all_coords(params: &PolicyParams<f64>) -> Vec<usize> {
    (0..params.len()).collect()
}

fn assert_check(name: &str, check: &FdCheck) {
    assert!(check.passes(), "{name}: {check:?}");
}

fn pairs_for(task: &TaskInstance, teacher: &PolicyParams<f64>, n: usize, seed: u64) -> Vec<PreferencePair<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let prompt = i % task.num_prompts();
            let y_plus = random_response(&mut rng, task);
            let y_minus = random_response(&mut rng, task);
            PreferencePair::new(&teacher.teacher(), prompt, y_plus, y_minus).unwrap()
        })
        .collect()
}

fn pbsd_batch_check(backend: Backend, seed: u64, beta: f64) -> FdCheck {
    let task = small_task(seed, 16);
    let student = random_params(&task, backend, seed, 1.0);
    let teacher = random_params(&task, backend, seed + 1000, 1.0);
    let pairs = pairs_for(&task, &teacher, 64, seed);
    let mut analytic = vec![0.0; student.len()];
    for pair in &pairs {
        let g = pbsd_grad(&student.student(), pair, beta).unwrap();
        analytic.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let f = |theta: &[f64], k: usize| pbsd_loss(&with_theta(&student, theta).student(), &pairs[k], beta).unwrap().loss;
    fd_check(&student.theta, &analytic, &all_coords(&student), pairs.len(), f)
}

#[test]
fn pbsd_gradient_matches_finite_differences() {
    for backend in BACKENDS {
        for beta in [0.1, 1.0] {
            let check = pbsd_batch_check(backend, 3, beta);
            assert!(check.significant >= 100, "{backend:?}: {check:?}");
            assert_check("pbsd", &check);
        }
    }
}

#[test]
fn pbsd_gradient_on_many_single_pairs() {
    let mut worst = 0.0f64;
    for seed in 0..100 {
        let task = small_task(seed, 2);
        let student = random_params(&task, Backend::Tabular, seed, 1.5);
        let teacher = random_params(&task, Backend::Tabular, seed + 500, 1.5);
        let pair = pairs_for(&task, &teacher, 1, seed).pop().unwrap();
        let beta = [0.05, 0.1, 0.5, 1.0][seed as usize % 4];
        let analytic = pbsd_grad(&student.student(), &pair, beta).unwrap();
        let f = |theta: &[f64]| pbsd_loss(&with_theta(&student, theta).student(), &pair, beta).unwrap().loss;
        let check = fd_check(&student.theta, &analytic, &all_coords(&student), 1, |theta, _| f(theta));
        assert_check("pbsd single pair", &check);
        worst = worst.max(check.max_rel_err);
    }
    assert!(worst <= common::FD_REL_TOL);
}

fn kl_check(backend: Backend, direction: KlDirection, seed: u64) -> FdCheck {
    let task = small_task(seed, 16);
    let responses: Vec<TokenSeq> = task.enumerate_responses().unwrap();
    let student = random_params(&task, backend, seed, 1.0);
    let teacher = random_params(&task, backend, seed + 77, 1.0);
    let term = |p: &PolicyParams<f64>, prompt: usize| {
        kl_matching_loss(&p.student(), &teacher.teacher(), prompt, direction, &responses).unwrap()
    };
    let mut analytic = vec![0.0; student.len()];
    for prompt in 0..task.num_prompts() {
        analytic.iter_mut().zip(&term(&student, prompt).1).for_each(|(a, b)| *a += b);
    }
    let f = |theta: &[f64], prompt: usize| term(&with_theta(&student, theta), prompt).0;
    fd_check(&student.theta, &analytic, &all_coords(&student), task.num_prompts(), f)
}

#[test]
fn reverse_kl_gradient_matches_finite_differences() {
    for backend in BACKENDS {
        let check = kl_check(backend, KlDirection::Reverse, 5);
        assert!(check.significant >= 100, "{check:?}");
        assert_check("reverse kl", &check);
    }
}

#[test]
fn forward_kl_gradient_matches_finite_differences() {
    for backend in BACKENDS {
        let check = kl_check(backend, KlDirection::Forward, 6);
        assert!(check.significant >= 100, "{check:?}");
        assert_check("forward kl", &check);
    }
}

#[test]
fn sft_gradient_matches_finite_differences() {
    for backend in BACKENDS {
        let task = small_task(9, 16);
        let student = random_params(&task, backend, 9, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let batch: Vec<(usize, TokenSeq)> =
            (0..64).map(|i| (i % task.num_prompts(), random_response(&mut rng, &task))).collect();
        let analytic = sft_loss(&student.student(), &batch).unwrap().1;
        // The mean loss split into one term per sample.
        let n = batch.len() as f64;
        let f = |theta: &[f64], k: usize| sft_loss(&with_theta(&student, theta).student(), &batch[k..=k]).unwrap().0 / n;
        let check = fd_check(&student.theta, &analytic, &all_coords(&student), batch.len(), f);
        assert!(check.significant >= 100, "{check:?}");
        assert_check("sft", &check);
    }
}

#[test]
fn grad_logprob_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut significant = 0;
    for trial in 0..120u64 {
        let task = small_task(trial, 3);
        let backend = BACKENDS[trial as usize % 2];
        let params = random_params(&task, backend, trial, 2.0);
        let prompt = rng.random_range(0..task.num_prompts());
        let y = random_response(&mut rng, &task);
        let teacher = trial % 3 == 0;
        let analytic = view_of(&params, teacher).grad_logprob(prompt, &y).unwrap();
        let coords: Vec<usize> = (0..params.len()).filter(|_| rng.random_bool(0.5)).collect();
        let f = |theta: &[f64], _: usize| view_of(&with_theta(&params, theta), teacher).logprob(prompt, &y).unwrap();
        let check = fd_check(&params.theta, &analytic, &coords, 1, f);
        assert_check("grad_logprob", &check);
        significant += check.significant;
    }
    assert!(significant >= 100);
}

fn view_of(p: &PolicyParams<f64>, teacher: bool) -> PolicyView<'_, f64> {
    if teacher {
        p.teacher()
    } else {
        p.student()
    }
}

#[test]
fn zero_margin_loss_is_log_two() {
    let task = small_task(2, 4);
    let student = random_params(&task, Backend::Tabular, 2, 1.0);
    let teacher = random_params(&task, Backend::Tabular, 3, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for i in 0..50 {
        let y = random_response(&mut rng, &task);
        let pair = PreferencePair::new(&teacher.teacher(), i % 4, y.clone(), y).unwrap();
        for beta in [0.05, 0.1, 0.5, 1.0, 7.0] {
            let report = pbsd_loss(&student.student(), &pair, beta).unwrap();
            assert_eq!(report.margin, 0.0);
            assert!((report.loss - std::f64::consts::LN_2).abs() <= 1e-12);
        }
    }
}
